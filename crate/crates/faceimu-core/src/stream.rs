//! Sensor transport building blocks: the 47-byte packet codec, per-sensor
//! clock models, tap-marker detection, and 60 fps frame assembly.
//!
//! Wire layout (little-endian, 47 bytes total):
//!
//! | offset | size | field               |
//! |--------|------|---------------------|
//! | 0      | 2    | magic 0xFA 0xCE     |
//! | 2      | 1    | version (1)         |
//! | 3      | 1    | kind: 0 data, 1 sync pulse, 2 tap marker |
//! | 4      | 1    | sensor id           |
//! | 5      | 4    | seq (u32)           |
//! | 9      | 8    | device timestamp, microseconds (u64) |
//! | 17     | 16   | quaternion w,x,y,z (f32 each) |
//! | 33     | 12   | acceleration x,y,z, m/s^2 (f32 each) |
//! | 45     | 2    | CRC-16/CCITT-FALSE over bytes 0..45 |
//!
//! Reference encoding of an all-zero data packet with the identity
//! quaternion (sensor 0, seq 0, timestamp 0):
//!
//! ```text
//! face0100000000000000000000000000000000803f000000000000000000000000
//! 0000000000000000000000005638
//! ```

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use thiserror::Error;

use crate::calib::{ImuSample, RawSequence};
use crate::geom::Quaternion;

pub const PACKET_LEN: usize = 47;
pub const MAGIC: [u8; 2] = [0xFA, 0xCE];
pub const PROTOCOL_VERSION: u8 = 1;
pub const DEFAULT_PORT: u16 = 47500;
/// Quaternion unit tolerance on decode; generous because the wire carries
/// 32-bit floats.
pub const WIRE_UNIT_TOL: f64 = 1e-3;
/// Frames of quiet signal required before a tap can be scored.
pub const TAP_BASELINE_FRAMES: usize = 30;
/// Default tap threshold, in multiples of the baseline MAD.
pub const TAP_DEFAULT_K: f64 = 8.0;
/// A grid slot counts as directly measured if a sample lies within this
/// distance of it.
pub const MEASURED_TOL_US: f64 = 1_000.0;
/// Gaps longer than this many frame periods are filled by holding the last
/// sample instead of interpolating.
pub const MAX_INTERP_GAP_PERIODS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StreamError {
    #[error("buffer of {got} bytes is shorter than a {PACKET_LEN}-byte packet")]
    ShortBuffer { got: usize },
    #[error("bad magic {got:02x?}")]
    BadMagic { got: [u8; 2] },
    #[error("unsupported protocol version {got}")]
    BadVersion { got: u8 },
    #[error("unknown packet kind {got}")]
    BadKind { got: u8 },
    #[error("crc mismatch: stored {stored:#06x}, computed {computed:#06x}")]
    BadCrc { stored: u16, computed: u16 },
    #[error("packet carries non-finite floats")]
    NonFinite,
    #[error("data-packet quaternion norm {norm} departs from unit beyond {WIRE_UNIT_TOL}")]
    NonUnitQuaternion { norm: f64 },
    #[error("no sync pulses provided")]
    NoPulses,
    #[error("no clock entry for sensor {sensor}")]
    UnknownSensor { sensor: u8 },
    #[error("sensor {sensor}: fitted drift {ppm:.1} ppm exceeds the 1000 ppm plausibility bound")]
    DriftOutOfRange { sensor: u8, ppm: f64 },
    #[error("need at least {TAP_BASELINE_FRAMES} baseline frames, got {got}")]
    BaselineTooShort { got: usize },
    #[error("no tap-like spike found")]
    TapNotFound,
    #[error("sensor {sensor} has no samples")]
    EmptyStream { sensor: usize },
    #[error("sensor streams share no common time span")]
    NoCommonSpan,
}

/// CRC-16/CCITT-FALSE: polynomial 0x1021, init 0xFFFF, no reflection, no
/// final xor. Check value: crc16("123456789") = 0x29B1.
pub fn crc16_ccitt(bytes: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in bytes {
        crc ^= (byte as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PacketKind {
    Data = 0,
    SyncPulse = 1,
    TapMarker = 2,
}

impl TryFrom<u8> for PacketKind {
    type Error = StreamError;
    fn try_from(v: u8) -> Result<Self, StreamError> {
        match v {
            0 => Ok(PacketKind::Data),
            1 => Ok(PacketKind::SyncPulse),
            2 => Ok(PacketKind::TapMarker),
            got => Err(StreamError::BadKind { got }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPacket {
    pub kind: PacketKind,
    pub sensor_id: u8,
    pub seq: u32,
    pub device_timestamp_us: u64,
    /// w, x, y, z.
    pub q: [f32; 4],
    /// m/s^2.
    pub a: [f32; 3],
}

impl SensorPacket {
    // The wire carries f32, so the decoded quaternion is renormalized
    // to restore the unit invariant every downstream consumer assumes.
    pub fn sample(&self) -> ImuSample {
        ImuSample {
            q: Quaternion::new(self.q[0] as f64, self.q[1] as f64, self.q[2] as f64, self.q[3] as f64)
                .normalized(),
            a: crate::geom::Vec3::new(self.a[0] as f64, self.a[1] as f64, self.a[2] as f64),
        }
    }
}

pub fn encode_packet(p: &SensorPacket) -> [u8; PACKET_LEN] {
    let mut buf = [0u8; PACKET_LEN];
    buf[0..2].copy_from_slice(&MAGIC);
    buf[2] = PROTOCOL_VERSION;
    buf[3] = p.kind as u8;
    buf[4] = p.sensor_id;
    buf[5..9].copy_from_slice(&p.seq.to_le_bytes());
    buf[9..17].copy_from_slice(&p.device_timestamp_us.to_le_bytes());
    for (i, v) in p.q.iter().enumerate() {
        buf[17 + 4 * i..21 + 4 * i].copy_from_slice(&v.to_le_bytes());
    }
    for (i, v) in p.a.iter().enumerate() {
        buf[33 + 4 * i..37 + 4 * i].copy_from_slice(&v.to_le_bytes());
    }
    let crc = crc16_ccitt(&buf[0..45]);
    buf[45..47].copy_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_packet(bytes: &[u8]) -> Result<SensorPacket, StreamError> {
    if bytes.len() < PACKET_LEN {
        return Err(StreamError::ShortBuffer { got: bytes.len() });
    }
    let bytes = &bytes[..PACKET_LEN];
    if bytes[0..2] != MAGIC {
        return Err(StreamError::BadMagic { got: [bytes[0], bytes[1]] });
    }
    if bytes[2] != PROTOCOL_VERSION {
        return Err(StreamError::BadVersion { got: bytes[2] });
    }
    let stored = u16::from_le_bytes([bytes[45], bytes[46]]);
    let computed = crc16_ccitt(&bytes[0..45]);
    if stored != computed {
        return Err(StreamError::BadCrc { stored, computed });
    }
    let kind = PacketKind::try_from(bytes[3])?;
    let mut f = [0f32; 7];
    for (i, v) in f.iter_mut().enumerate() {
        let o = 17 + 4 * i;
        *v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        if !v.is_finite() {
            return Err(StreamError::NonFinite);
        }
    }
    let q = [f[0], f[1], f[2], f[3]];
    if kind == PacketKind::Data {
        let norm = (f[0] as f64).hypot(f[1] as f64).hypot(f[2] as f64).hypot(f[3] as f64);
        if (norm - 1.0).abs() > WIRE_UNIT_TOL {
            return Err(StreamError::NonUnitQuaternion { norm });
        }
    }
    Ok(SensorPacket {
        kind,
        sensor_id: bytes[4],
        seq: u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]),
        device_timestamp_us: u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")),
        q,
        a: [f[4], f[5], f[6]],
    })
}

/// Linear clock model per sensor: device = host * (1 + drift) + offset,
/// with drift in parts per million and times in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockEntry {
    pub offset_us: f64,
    pub drift_ppm: f64,
}

impl ClockEntry {
    pub const IDENTITY: ClockEntry = ClockEntry { offset_us: 0.0, drift_ppm: 0.0 };

    pub fn device_to_host(&self, device_us: f64) -> f64 {
        (device_us - self.offset_us) / (1.0 + self.drift_ppm * 1e-6)
    }

    pub fn host_to_device(&self, host_us: f64) -> f64 {
        host_us * (1.0 + self.drift_ppm * 1e-6) + self.offset_us
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClockModel {
    pub entries: BTreeMap<u8, ClockEntry>,
}

impl ClockModel {
    /// All-zero model covering sensors 0..count.
    pub fn identity(count: u8) -> Self {
        Self { entries: (0..count).map(|id| (id, ClockEntry::IDENTITY)).collect() }
    }

    pub fn to_host_time(&self, sensor: u8, device_us: f64) -> Result<f64, StreamError> {
        self.entries
            .get(&sensor)
            .map(|e| e.device_to_host(device_us))
            .ok_or(StreamError::UnknownSensor { sensor })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseObservation {
    pub sensor_id: u8,
    pub host_time_us: f64,
    pub device_timestamp_us: f64,
}

/// Least-squares fit of each sensor's clock line from shared sync pulses.
/// One pulse gives an offset-only fit; two or more also recover drift.
pub fn estimate_clock(pulses: &[PulseObservation]) -> Result<ClockModel, StreamError> {
    if pulses.is_empty() {
        return Err(StreamError::NoPulses);
    }
    let mut by_sensor: BTreeMap<u8, Vec<(f64, f64)>> = BTreeMap::new();
    for p in pulses {
        by_sensor.entry(p.sensor_id).or_default().push((p.host_time_us, p.device_timestamp_us));
    }
    let mut entries = BTreeMap::new();
    for (sensor, obs) in by_sensor {
        let entry = fit_line(&obs);
        if entry.drift_ppm.abs() >= 1_000.0 {
            return Err(StreamError::DriftOutOfRange { sensor, ppm: entry.drift_ppm });
        }
        entries.insert(sensor, entry);
    }
    Ok(ClockModel { entries })
}

/// Centered least squares in seconds relative to the first pulse, which
/// keeps the normal equations well conditioned for microsecond-scale inputs.
fn fit_line(obs: &[(f64, f64)]) -> ClockEntry {
    let (x0, y0) = obs[0];
    if obs.len() == 1 {
        return ClockEntry { offset_us: y0 - x0, drift_ppm: 0.0 };
    }
    let n = obs.len() as f64;
    let xs: Vec<f64> = obs.iter().map(|&(x, _)| (x - x0) * 1e-6).collect();
    let ys: Vec<f64> = obs.iter().map(|&(_, y)| (y - y0) * 1e-6).collect();
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - xbar) * (x - xbar);
        sxy += (x - xbar) * (y - ybar);
    }
    if sxx == 0.0 {
        // All pulses share one host time: only an offset is identifiable.
        let mean_residual = obs.iter().map(|&(x, y)| y - x).sum::<f64>() / n;
        return ClockEntry { offset_us: mean_residual, drift_ppm: 0.0 };
    }
    let slope = sxy / sxx;
    let intercept_s = ybar - slope * xbar;
    ClockEntry {
        offset_us: y0 - slope * x0 + intercept_s * 1e6,
        drift_ppm: (slope - 1.0) * 1e6,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapEvent {
    pub frame: usize,
    pub peak: f64,
}

/// Find the first frame whose acceleration magnitude departs from the
/// baseline median by more than k baseline MADs. The baseline is the first
/// [`TAP_BASELINE_FRAMES`] frames; `peak` is the largest magnitude of the
/// contiguous above-threshold run starting at the detection.
pub fn detect_tap(magnitudes: &[f64], k: f64) -> Result<TapEvent, StreamError> {
    if magnitudes.len() < TAP_BASELINE_FRAMES {
        return Err(StreamError::BaselineTooShort { got: magnitudes.len() });
    }
    let mut baseline: Vec<f64> = magnitudes[..TAP_BASELINE_FRAMES].to_vec();
    baseline.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let median = baseline[TAP_BASELINE_FRAMES / 2];
    let mut devs: Vec<f64> = baseline.iter().map(|m| (m - median).abs()).collect();
    devs.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let mad = devs[TAP_BASELINE_FRAMES / 2];
    // An exactly flat baseline has zero MAD; fall back to a tiny absolute
    // floor so a genuine spike still registers.
    let threshold = if mad > 0.0 { k * mad } else { (median.abs() * 1e-6).max(1e-9) };
    let hit = magnitudes
        .iter()
        .position(|m| (m - median).abs() > threshold)
        .ok_or(StreamError::TapNotFound)?;
    let mut peak = magnitudes[hit];
    for &m in &magnitudes[hit..] {
        if (m - median).abs() > threshold {
            peak = peak.max(m);
        } else {
            break;
        }
    }
    Ok(TapEvent { frame: hit, peak })
}

/// How a frame slot was produced during assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// An input sample lay within [`MEASURED_TOL_US`] of the grid point.
    Measured,
    /// Interpolated between neighbors (slerp orientation, lerp acceleration).
    Interpolated,
    /// Gap exceeded [`MAX_INTERP_GAP_PERIODS`]; the last sample was held.
    Held,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedSample {
    pub host_time_us: f64,
    pub sample: ImuSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuFrame {
    pub samples: Vec<ImuSample>,
    pub provenance: Vec<Provenance>,
}

/// Complete frames on an exact 1/fps grid in host time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBuffer {
    pub start_host_us: f64,
    pub fps: f64,
    pub frames: Vec<ImuFrame>,
}

impl FrameBuffer {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_time_us(&self, frame: usize) -> f64 {
        self.start_host_us + frame as f64 * 1e6 / self.fps
    }

    pub fn to_raw_sequence(&self) -> RawSequence {
        let sensors = self.frames.first().map_or(0, |f| f.samples.len());
        let mut samples: Vec<Vec<ImuSample>> =
            (0..sensors).map(|_| Vec::with_capacity(self.frames.len())).collect();
        for frame in &self.frames {
            for (sensor, s) in frame.samples.iter().enumerate() {
                samples[sensor].push(*s);
            }
        }
        RawSequence { samples }
    }
}

/// Resample per-sensor timestamped streams onto a common fps grid spanning
/// the interval covered by every sensor. Streams are indexed by sensor id
/// and sorted by time internally.
pub fn assemble_frames(streams: &[Vec<TimedSample>], fps: f64) -> Result<FrameBuffer, StreamError> {
    for (sensor, stream) in streams.iter().enumerate() {
        if stream.is_empty() {
            return Err(StreamError::EmptyStream { sensor });
        }
    }
    if streams.is_empty() {
        return Err(StreamError::NoCommonSpan);
    }
    let mut sorted: Vec<Vec<TimedSample>> = streams.to_vec();
    for stream in &mut sorted {
        stream.sort_by(|a, b| a.host_time_us.partial_cmp(&b.host_time_us).expect("finite times"));
    }
    let start = sorted
        .iter()
        .map(|s| s[0].host_time_us)
        .fold(f64::NEG_INFINITY, f64::max);
    let end = sorted
        .iter()
        .map(|s| s.last().expect("non-empty").host_time_us)
        .fold(f64::INFINITY, f64::min);
    if end < start {
        return Err(StreamError::NoCommonSpan);
    }
    let period = 1e6 / fps;
    // Timestamp jitter within the measurement tolerance must not drop a
    // trailing frame, so the span is padded by that tolerance before the
    // grid is sized; every grid point stays within MEASURED_TOL_US of data.
    let count = ((end - start + MEASURED_TOL_US) / period).floor() as usize + 1;
    let max_gap = MAX_INTERP_GAP_PERIODS * period;
    let mut frames = Vec::with_capacity(count);
    let mut cursors = alloc::vec![0usize; sorted.len()];
    for k in 0..count {
        let g = start + k as f64 * period;
        let mut samples = Vec::with_capacity(sorted.len());
        let mut provenance = Vec::with_capacity(sorted.len());
        for (stream, cursor) in sorted.iter().zip(cursors.iter_mut()) {
            // Advance to the last sample at or before g.
            while *cursor + 1 < stream.len() && stream[*cursor + 1].host_time_us <= g {
                *cursor += 1;
            }
            let prev = &stream[*cursor];
            let next = if *cursor + 1 < stream.len() { Some(&stream[*cursor + 1]) } else { None };
            let nearest = match next {
                Some(n) if (n.host_time_us - g).abs() < (g - prev.host_time_us).abs() => n,
                _ => prev,
            };
            if (nearest.host_time_us - g).abs() <= MEASURED_TOL_US {
                samples.push(nearest.sample);
                provenance.push(Provenance::Measured);
            } else if let Some(n) = next {
                let span = n.host_time_us - prev.host_time_us;
                if span <= max_gap {
                    let f = (g - prev.host_time_us) / span;
                    samples.push(ImuSample {
                        q: prev.sample.q.slerp(n.sample.q, f),
                        a: prev.sample.a + (n.sample.a - prev.sample.a) * f,
                    });
                    provenance.push(Provenance::Interpolated);
                } else {
                    samples.push(prev.sample);
                    provenance.push(Provenance::Held);
                }
            } else {
                samples.push(prev.sample);
                provenance.push(Provenance::Held);
            }
        }
        frames.push(ImuFrame { samples, provenance });
    }
    Ok(FrameBuffer { start_host_us: start, fps, frames })
}
