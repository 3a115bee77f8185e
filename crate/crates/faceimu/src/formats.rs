//! On-disk formats for the pipeline.
//!
//! | artifact            | format | shape |
//! |---------------------|--------|-------|
//! | sensor frames       | JSONL  | one object per frame: optional `t` (host µs) + `sensors` array of `{q:[w,x,y,z], a:[x,y,z]}` |
//! | calibration profile | JSON   | `convention`, `aux_index`, `neutral` (9 row-major entries per sensor), `mag` |
//! | blendshape rig      | JSON   | `neutral`/`deltas` vertex arrays (mm), `landmarks`, `anchors` |
//! | weight sequence     | CSV    | header `frame,w0..`, one row per frame |
//! | magnetometer sweep  | CSV    | header `sensor,x,y,z`, one sample per row |
//! | training loss       | CSV    | header `epoch,train_loss,eval_loss` (eval may be empty) |
//! | eval report         | JSON summary + CSV trace `frame,pve,pve_lmk,mse` |
//! | model checkpoint    | binary tensor container (see core checkpoint docs) |
//! | pipeline config     | TOML or JSON, all fields optional |
//!
//! Raw and calibrated sequences share the frames format; calibration
//! changes the meaning of the values, not the layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use faceimu_core::calib::{CalibrationProfile, ImuSample, MagCalibration, RawSequence};
use faceimu_core::diffusion::DenoiserParams;
use faceimu_core::facesim::{Anchor, BlendshapeRig, WeightSequence};
use faceimu_core::geom::{Quaternion, RotationMatrix, Vec3};
use faceimu_core::metrics::EvalReport;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROFILE_CONVENTION: &str = "world_to_sensor";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
}

impl FormatError {
    fn schema(path: &Path, message: impl Into<String>) -> Self {
        Self::Schema { path: path.display().to_string(), message: message.into() }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

fn read_to_string(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|e| FormatError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

// ---------------------------------------------------------------- frames

#[derive(Debug, Serialize, Deserialize)]
struct FrameLine {
    #[serde(skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    sensors: Vec<SampleJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleJson {
    q: [f64; 4],
    a: [f64; 3],
}

impl From<&ImuSample> for SampleJson {
    fn from(s: &ImuSample) -> Self {
        Self { q: [s.q.w, s.q.x, s.q.y, s.q.z], a: [s.a.x, s.a.y, s.a.z] }
    }
}

impl SampleJson {
    fn to_sample(&self) -> ImuSample {
        ImuSample {
            q: Quaternion::new(self.q[0], self.q[1], self.q[2], self.q[3]),
            a: Vec3::new(self.a[0], self.a[1], self.a[2]),
        }
    }
}

/// Frames on disk: outer index frame, inner index sensor, plus optional
/// per-frame host timestamps.
pub struct FramesFile {
    pub sequence: RawSequence,
    pub times_us: Option<Vec<f64>>,
}

pub fn save_frames(
    path: &Path,
    seq: &RawSequence,
    times_us: Option<&[f64]>,
) -> Result<(), FormatError> {
    let frames = seq.num_frames();
    if let Some(t) = times_us {
        if t.len() != frames {
            return Err(FormatError::schema(
                path,
                format!("{} timestamps for {} frames", t.len(), frames),
            ));
        }
    }
    let mut out = Vec::new();
    for f in 0..frames {
        let line = FrameLine {
            t: times_us.map(|t| t[f]),
            sensors: seq.samples.iter().map(|s| SampleJson::from(&s[f])).collect(),
        };
        serde_json::to_writer(&mut out, &line).expect("frame serialization is infallible");
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn load_frames(path: &Path) -> Result<FramesFile, FormatError> {
    let file = fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows: Vec<FrameLine> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FormatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: FrameLine = serde_json::from_str(&line)
            .map_err(|e| FormatError::schema(path, format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(FormatError::schema(path, "no frames"));
    }
    let sensors = rows[0].sensors.len();
    if sensors == 0 {
        return Err(FormatError::schema(path, "frame 0 has no sensors"));
    }
    let mut samples: Vec<Vec<ImuSample>> = vec![Vec::with_capacity(rows.len()); sensors];
    let mut times = Vec::with_capacity(rows.len());
    let mut any_time = false;
    for (f, row) in rows.iter().enumerate() {
        if row.sensors.len() != sensors {
            return Err(FormatError::schema(
                path,
                format!("frame {f} has {} sensors, frame 0 has {sensors}", row.sensors.len()),
            ));
        }
        for (s, sample) in row.sensors.iter().enumerate() {
            samples[s].push(sample.to_sample());
        }
        any_time |= row.t.is_some();
        times.push(row.t.unwrap_or(f64::NAN));
    }
    if any_time && times.iter().any(|t| t.is_nan()) {
        return Err(FormatError::schema(path, "timestamps must be on every frame or none"));
    }
    Ok(FramesFile {
        sequence: RawSequence { samples },
        times_us: if any_time { Some(times) } else { None },
    })
}

// --------------------------------------------------------------- profile

#[derive(Debug, Serialize, Deserialize)]
struct ProfileJson {
    convention: String,
    aux_index: usize,
    /// Per sensor: 9 row-major rotation entries.
    neutral: Vec<[f64; 9]>,
    mag: Vec<MagJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MagJson {
    offset: [f64; 3],
    scale: [f64; 3],
}

fn matrix_to_row_major(m: &RotationMatrix) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m.0[r][c];
        }
    }
    out
}

fn matrix_from_row_major(v: &[f64; 9]) -> RotationMatrix {
    RotationMatrix([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
}

pub fn save_profile(path: &Path, profile: &CalibrationProfile) -> Result<(), FormatError> {
    let json = ProfileJson {
        convention: PROFILE_CONVENTION.to_string(),
        aux_index: profile.aux_index,
        neutral: profile.neutral.iter().map(matrix_to_row_major).collect(),
        mag: profile
            .mag
            .iter()
            .map(|m| MagJson {
                offset: [m.offset.x, m.offset.y, m.offset.z],
                scale: [m.scale.x, m.scale.y, m.scale.z],
            })
            .collect(),
    };
    write_bytes(path, serde_json::to_string_pretty(&json).expect("plain data").as_bytes())
}

pub fn load_profile(path: &Path) -> Result<CalibrationProfile, FormatError> {
    let json: ProfileJson = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| FormatError::schema(path, e.to_string()))?;
    if json.convention != PROFILE_CONVENTION {
        return Err(FormatError::schema(
            path,
            format!("convention {:?}, expected {PROFILE_CONVENTION:?}", json.convention),
        ));
    }
    let profile = CalibrationProfile {
        aux_index: json.aux_index,
        neutral: json.neutral.iter().map(matrix_from_row_major).collect(),
        mag: json
            .mag
            .iter()
            .map(|m| MagCalibration {
                offset: Vec3::new(m.offset[0], m.offset[1], m.offset[2]),
                scale: Vec3::new(m.scale[0], m.scale[1], m.scale[2]),
            })
            .collect(),
    };
    profile.validate().map_err(|e| FormatError::schema(path, e.to_string()))?;
    Ok(profile)
}

// ------------------------------------------------------------------- rig

#[derive(Debug, Serialize, Deserialize)]
struct RigJson {
    neutral: Vec<[f64; 3]>,
    deltas: Vec<Vec<[f64; 3]>>,
    landmarks: Vec<usize>,
    anchors: Vec<AnchorJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnchorJson {
    sensor_id: usize,
    vertex: usize,
    supports: [usize; 2],
}

fn vec3_to_array(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn vec3_from_array(v: &[f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

pub fn save_rig(path: &Path, rig: &BlendshapeRig) -> Result<(), FormatError> {
    let json = RigJson {
        neutral: rig.neutral.iter().map(vec3_to_array).collect(),
        deltas: rig.deltas.iter().map(|d| d.iter().map(vec3_to_array).collect()).collect(),
        landmarks: rig.landmarks.clone(),
        anchors: rig
            .anchors
            .iter()
            .map(|a| AnchorJson { sensor_id: a.sensor_id, vertex: a.vertex, supports: a.supports })
            .collect(),
    };
    write_bytes(path, serde_json::to_string(&json).expect("plain data").as_bytes())
}

pub fn load_rig(path: &Path) -> Result<BlendshapeRig, FormatError> {
    let json: RigJson = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| FormatError::schema(path, e.to_string()))?;
    let rig = BlendshapeRig {
        neutral: json.neutral.iter().map(vec3_from_array).collect(),
        deltas: json
            .deltas
            .iter()
            .map(|d| d.iter().map(vec3_from_array).collect())
            .collect(),
        landmarks: json.landmarks,
        anchors: json
            .anchors
            .iter()
            .map(|a| Anchor { sensor_id: a.sensor_id, vertex: a.vertex, supports: a.supports })
            .collect(),
    };
    rig.validate().map_err(|e| FormatError::schema(path, e.to_string()))?;
    Ok(rig)
}

// --------------------------------------------------------------- weights

pub fn save_weights(path: &Path, weights: &WeightSequence) -> Result<(), FormatError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["frame".to_string()];
    header.extend((0..weights.m).map(|k| format!("w{k}")));
    wtr.write_record(&header).expect("in-memory write");
    for (f, row) in weights.frames.iter().enumerate() {
        if row.len() != weights.m {
            return Err(FormatError::schema(
                path,
                format!("frame {f} has {} weights, expected {}", row.len(), weights.m),
            ));
        }
        let mut rec = vec![f.to_string()];
        rec.extend(row.iter().map(|w| w.to_string()));
        wtr.write_record(&rec).expect("in-memory write");
    }
    write_bytes(path, &wtr.into_inner().expect("in-memory write"))
}

pub fn load_weights(path: &Path) -> Result<WeightSequence, FormatError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => {
            FormatError::io(path, std::io::Error::other(e.to_string()))
        }
        _ => FormatError::schema(path, e.to_string()),
    })?;
    let headers = rdr.headers().map_err(|e| FormatError::schema(path, e.to_string()))?.clone();
    if headers.is_empty() || &headers[0] != "frame" {
        return Err(FormatError::schema(path, "first column must be `frame`"));
    }
    let m = headers.len() - 1;
    if m == 0 {
        return Err(FormatError::schema(path, "no weight columns"));
    }
    let mut frames = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| FormatError::schema(path, e.to_string()))?;
        if rec.len() != m + 1 {
            return Err(FormatError::schema(
                path,
                format!("row {}: {} fields, expected {}", i + 1, rec.len(), m + 1),
            ));
        }
        let mut row = Vec::with_capacity(m);
        for v in rec.iter().skip(1) {
            row.push(v.parse::<f64>().map_err(|e| {
                FormatError::schema(path, format!("row {}: {e}", i + 1))
            })?);
        }
        frames.push(row);
    }
    if frames.is_empty() {
        return Err(FormatError::schema(path, "no weight rows"));
    }
    Ok(WeightSequence { m, frames })
}

// ---------------------------------------------------- magnetometer sweep

/// `sensor,x,y,z` rows grouped by sensor id, ascending.
pub fn load_mag_sweep(path: &Path) -> Result<BTreeMap<usize, Vec<Vec3>>, FormatError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => {
            FormatError::io(path, std::io::Error::other(e.to_string()))
        }
        _ => FormatError::schema(path, e.to_string()),
    })?;
    let headers = rdr.headers().map_err(|e| FormatError::schema(path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["sensor", "x", "y", "z"] {
        return Err(FormatError::schema(path, "header must be sensor,x,y,z"));
    }
    let mut by_sensor: BTreeMap<usize, Vec<Vec3>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| FormatError::schema(path, e.to_string()))?;
        let bad = |e: String| FormatError::schema(path, format!("row {}: {e}", i + 1));
        let sensor: usize = rec[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        let mut xyz = [0.0; 3];
        for (k, v) in xyz.iter_mut().enumerate() {
            *v = rec[k + 1].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        }
        by_sensor.entry(sensor).or_default().push(Vec3::new(xyz[0], xyz[1], xyz[2]));
    }
    if by_sensor.is_empty() {
        return Err(FormatError::schema(path, "no samples"));
    }
    Ok(by_sensor)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MagReportEntry {
    pub sensor: usize,
    pub offset: [f64; 3],
    pub scale: [f64; 3],
}

pub fn save_mag_report(path: &Path, entries: &[MagReportEntry]) -> Result<(), FormatError> {
    write_bytes(path, serde_json::to_string_pretty(entries).expect("plain data").as_bytes())
}

// ------------------------------------------------------------ loss trace

pub fn save_loss_csv(
    path: &Path,
    trace: &[faceimu_core::diffusion::LossEntry],
) -> Result<(), FormatError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["epoch", "train_loss", "eval_loss"]).expect("in-memory write");
    for e in trace {
        wtr.write_record(&[
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.eval_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    write_bytes(path, &wtr.into_inner().expect("in-memory write"))
}

// ------------------------------------------------------------ eval report

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummaryJson {
    pub pve_mean: f64,
    pub pve_std: f64,
    pub pve_lmk_mean: f64,
    pub pve_lmk_std: f64,
    pub mse: f64,
    pub frames: usize,
}

pub fn save_eval_report(
    json_path: Option<&Path>,
    csv_path: Option<&Path>,
    report: &EvalReport,
) -> Result<(), FormatError> {
    if let Some(path) = json_path {
        let summary = EvalSummaryJson {
            pve_mean: report.pve_mean,
            pve_std: report.pve_std,
            pve_lmk_mean: report.pve_lmk_mean,
            pve_lmk_std: report.pve_lmk_std,
            mse: report.mse,
            frames: report.pve_trace.len(),
        };
        write_bytes(path, serde_json::to_string_pretty(&summary).expect("plain data").as_bytes())?;
    }
    if let Some(path) = csv_path {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["frame", "pve", "pve_lmk", "mse"]).expect("in-memory write");
        for f in 0..report.pve_trace.len() {
            wtr.write_record(&[
                f.to_string(),
                report.pve_trace[f].to_string(),
                report.pve_lmk_trace[f].to_string(),
                report.mse_trace[f].to_string(),
            ])
            .expect("in-memory write");
        }
        write_bytes(path, &wtr.into_inner().expect("in-memory write"))?;
    }
    Ok(())
}

// ------------------------------------------------------------- checkpoint

pub fn save_model(path: &Path, params: &DenoiserParams) -> Result<(), FormatError> {
    write_bytes(path, &params.to_checkpoint_bytes())
}

pub fn load_model(path: &Path) -> Result<DenoiserParams, FormatError> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    DenoiserParams::from_checkpoint_bytes(&bytes)
        .map_err(|e| FormatError::schema(path, e.to_string()))
}

// ----------------------------------------------------------------- config

/// Optional defaults for shared pipeline knobs. Explicit CLI flags win
/// over config values; config values win over built-in defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensors: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tap_sensor: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_noise: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, FormatError> {
    let text = read_to_string(path)?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let config = if is_json {
        serde_json::from_str(&text).map_err(|e| FormatError::schema(path, e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| FormatError::schema(path, e.to_string()))?
    };
    Ok(config)
}

pub fn save_config(path: &Path, config: &PipelineConfig) -> Result<(), FormatError> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let text = if is_json {
        serde_json::to_string_pretty(config).expect("plain data")
    } else {
        toml::to_string_pretty(config).map_err(|e| FormatError::schema(path, e.to_string()))?
    };
    write_bytes(path, text.as_bytes())
}

// ------------------------------------------------------------ ingest report

#[derive(Debug, Serialize, Deserialize)]
pub struct ClockEntryJson {
    pub sensor: u8,
    pub offset_us: f64,
    pub drift_ppm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestReportJson {
    pub clock: Vec<ClockEntryJson>,
    pub tap_frame: Option<usize>,
    pub tap_marker_frame: Option<usize>,
    pub frames: usize,
    pub packets_received: usize,
    pub packets_rejected: usize,
    pub duplicates_dropped: usize,
    pub frames_measured: usize,
    pub frames_interpolated: usize,
    pub frames_held: usize,
}

pub fn save_ingest_report(path: &Path, report: &IngestReportJson) -> Result<(), FormatError> {
    write_bytes(path, serde_json::to_string_pretty(report).expect("plain data").as_bytes())
}

// --------------------------------------------------------- sensitivity

#[derive(Debug, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub sensor: usize,
    /// Variance of acceleration magnitude, in 1e-3 (m/s^2)^2 units.
    pub sensitivity: f64,
}

pub fn save_sensitivity_report(
    path: &Path,
    entries: &[SensitivityEntry],
) -> Result<(), FormatError> {
    write_bytes(path, serde_json::to_string_pretty(entries).expect("plain data").as_bytes())
}

/// Buffered plain-text writer for stdout-style tables.
pub fn write_table(mut out: impl Write, rows: &[(String, String)]) -> std::io::Result<()> {
    let width = rows.iter().map(|(a, _)| a.len()).max().unwrap_or(0);
    for (a, b) in rows {
        writeln!(out, "{a:width$}  {b}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use faceimu_core::facesim::synthetic::default_rig;
    use faceimu_core::facesim::{generate_synthetic_weights, WeightStyle};
    use faceimu_core::geom::Vec3;
    use tempfile::tempdir;

    #[test]
    fn frames_round_trip_with_and_without_times() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        let seq = RawSequence {
            samples: vec![
                vec![
                    ImuSample {
                        q: Quaternion::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.3),
                        a: Vec3::new(0.1, -0.2, 9.8),
                    },
                    ImuSample::identity(),
                ],
                vec![
                    ImuSample::identity(),
                    ImuSample {
                        q: Quaternion::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), -0.7),
                        a: Vec3::new(-3.0, 0.5, 0.25),
                    },
                ],
            ],
        };
        save_frames(&path, &seq, None).unwrap();
        let back = load_frames(&path).unwrap();
        assert_eq!(back.sequence, seq);
        assert!(back.times_us.is_none());

        save_frames(&path, &seq, Some(&[0.0, 16666.5])).unwrap();
        let back = load_frames(&path).unwrap();
        assert_eq!(back.sequence, seq);
        assert_eq!(back.times_us, Some(vec![0.0, 16666.5]));
    }

    #[test]
    fn frames_reject_ragged_sensor_counts() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"sensors\":[{\"q\":[1,0,0,0],\"a\":[0,0,0]}]}\n",
                "{\"sensors\":[{\"q\":[1,0,0,0],\"a\":[0,0,0]},{\"q\":[1,0,0,0],\"a\":[0,0,0]}]}\n"
            ),
        )
        .unwrap();
        assert!(matches!(load_frames(&path), Err(FormatError::Schema { .. })));
    }

    #[test]
    fn profile_round_trip_and_convention_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("profile.json");
        let profile = CalibrationProfile {
            neutral: vec![
                RotationMatrix::IDENTITY,
                RotationMatrix::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), 0.4),
            ],
            aux_index: 0,
            mag: vec![MagCalibration::identity(); 2],
        };
        save_profile(&path, &profile).unwrap();
        let back = load_profile(&path).unwrap();
        assert_eq!(back, profile);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace(PROFILE_CONVENTION, "sensor_to_world");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_profile(&path), Err(FormatError::Schema { .. })));
    }

    #[test]
    fn rig_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rig.json");
        let rig = default_rig();
        save_rig(&path, &rig).unwrap();
        assert_eq!(load_rig(&path).unwrap(), rig);
    }

    #[test]
    fn weights_round_trip_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        let w = generate_synthetic_weights(8, 50, 3, WeightStyle::SpeechLike);
        save_weights(&path, &w).unwrap();
        assert_eq!(load_weights(&path).unwrap(), w);
    }

    #[test]
    fn mag_sweep_parses_grouped_rows() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        std::fs::write(&path, "sensor,x,y,z\n0,1,2,3\n1,4,5,6\n0,-1,0,2\n").unwrap();
        let by_sensor = load_mag_sweep(&path).unwrap();
        assert_eq!(by_sensor.len(), 2);
        assert_eq!(by_sensor[&0].len(), 2);
        assert_eq!(by_sensor[&1][0], Vec3::new(4.0, 5.0, 6.0));
        assert_eq!(by_sensor[&0][1], Vec3::new(-1.0, 0.0, 2.0));
    }

    #[test]
    fn config_round_trips_in_both_formats() {
        let dir = tempdir().unwrap();
        let config = PipelineConfig {
            fps: Some(60.0),
            seed: Some(7),
            t_noise: Some(50),
            lr: Some(2e-4),
            ..PipelineConfig::default()
        };
        for name in ["config.toml", "config.json"] {
            let path = dir.path().join(name);
            save_config(&path, &config).unwrap();
            assert_eq!(load_config(&path).unwrap(), config, "{name}");
        }
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "fsp = 60.0\n").unwrap();
        assert!(matches!(load_config(&path), Err(FormatError::Schema { .. })));
    }

    #[test]
    fn missing_files_are_io_errors() {
        let missing = Path::new("/nonexistent/deeply/missing.json");
        assert!(matches!(load_profile(missing), Err(FormatError::Io { .. })));
        assert!(matches!(load_frames(missing), Err(FormatError::Io { .. })));
        assert!(matches!(load_weights(missing), Err(FormatError::Io { .. })));
    }
}
