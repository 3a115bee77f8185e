//! Sensor calibration: magnetometer offset/scale, neutral-relative rotation,
//! world acceleration alignment, and auxiliary-IMU head compensation.
//!
//! Sensor id 0 is the auxiliary IMU mounted rigidly on the head (behind the
//! ear). Its neutral-relative rotation captures rigid head motion, which is
//! factored out of every facial sensor: for i != 0,
//!
//!   R_calib^i = (R_rel^0)^-1 * R_rel^i,  a^i = (R_rel^0)^-1 * a_align^i
//!
//! with R_rel^i = (R_neutral^i)^-1 * R_raw^i and a_align^i = R_raw^i^-1 *
//! a_raw^i. All matrices are world-to-sensor (see `geom`), which is what
//! makes the cancellation exact: if every sensor moves rigidly by a world
//! rotation G_t, then R_raw^i = R_neutral^i * G_t^-1, every R_rel^i equals
//! G_t^-1, and R_calib^i collapses to the identity.

use alloc::vec::Vec;
use thiserror::Error;

use crate::geom::{GeomError, Quaternion, RotationMatrix, Vec3};

/// Multiple of the median absolute deviation beyond which a magnetometer
/// sample counts as an outlier.
pub const MAG_OUTLIER_MAD_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibError {
    #[error("no magnetometer samples")]
    EmptyInput,
    #[error("fewer than two magnetometer samples remain after outlier filtering")]
    TooFewSamples,
    #[error("degenerate magnetometer axis {axis}: all samples share one value")]
    DegenerateAxis { axis: char },
    #[error("auxiliary sensor index {aux} out of range for {count} sensors")]
    MissingAux { aux: usize, count: usize },
    #[error("profile covers {profile} sensors but the sequence has {sequence}")]
    SensorCountMismatch { profile: usize, sequence: usize },
    #[error("sensor {sensor} has {got} frames, expected {expected}")]
    FrameCountMismatch { sensor: usize, expected: usize, got: usize },
    #[error("sensor {sensor} frame {frame}: {source}")]
    BadOrientation { sensor: usize, frame: usize, source: GeomError },
}

/// Per-axis hard-iron offset and soft-iron scale for one magnetometer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagCalibration {
    pub offset: Vec3,
    pub scale: Vec3,
}

impl MagCalibration {
    pub fn identity() -> Self {
        Self { offset: Vec3::ZERO, scale: Vec3::new(1.0, 1.0, 1.0) }
    }
}

/// Which way the auxiliary rotation is applied to world-frame accelerations.
///
/// `Literal` multiplies by (R_rel^0)^-1, mirroring the orientation
/// compensation. `Inverse` multiplies by R_rel^0 instead; under the
/// world-to-sensor convention that is the factor that re-expresses a world
/// vector in the rotated head frame. Orientation tests pin only the
/// rotation side, so both directions stay available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccHeadComp {
    #[default]
    Literal,
    Inverse,
}

/// Neutral orientations and magnetometer calibrations for every sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProfile {
    /// Indexed by sensor id; world-to-sensor orientation of the relaxed pose.
    pub neutral: Vec<RotationMatrix>,
    /// Sensor id of the auxiliary (head-reference) IMU. Zero by convention.
    pub aux_index: usize,
    /// Indexed by sensor id.
    pub mag: Vec<MagCalibration>,
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<(), CalibError> {
        if self.aux_index >= self.neutral.len() {
            return Err(CalibError::MissingAux { aux: self.aux_index, count: self.neutral.len() });
        }
        Ok(())
    }
}

/// One sensor's sample for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub q: Quaternion,
    /// m/s^2; world-aligned after calibration, sensor-frame before.
    pub a: Vec3,
}

impl ImuSample {
    pub fn identity() -> Self {
        Self { q: Quaternion::IDENTITY, a: Vec3::ZERO }
    }
}

/// Frame-aligned raw signal, outer index = sensor id, inner index = frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSequence {
    pub samples: Vec<Vec<ImuSample>>,
}

impl RawSequence {
    pub fn num_sensors(&self) -> usize {
        self.samples.len()
    }

    pub fn num_frames(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn validate_shape(&self) -> Result<(), CalibError> {
        let expected = self.num_frames();
        for (sensor, track) in self.samples.iter().enumerate() {
            if track.len() != expected {
                return Err(CalibError::FrameCountMismatch { sensor, expected, got: track.len() });
            }
        }
        Ok(())
    }
}

/// Calibrated signal, same shape as its source [`RawSequence`]; quaternions
/// are unit and sign-canonicalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedSequence {
    pub samples: Vec<Vec<ImuSample>>,
}

impl CalibratedSequence {
    pub fn num_sensors(&self) -> usize {
        self.samples.len()
    }

    pub fn num_frames(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn axis_values(samples: &[Vec3], axis: usize) -> Vec<f64> {
    samples
        .iter()
        .map(|s| match axis {
            0 => s.x,
            1 => s.y,
            _ => s.z,
        })
        .collect()
}

/// Drop samples farther than [`MAG_OUTLIER_MAD_FACTOR`] median absolute
/// deviations from the componentwise median on any axis. An axis whose MAD
/// is zero cannot vote (its spread carries no scale information).
fn filter_outliers(samples: &[Vec3]) -> Vec<Vec3> {
    let mut med = [0.0; 3];
    let mut mad = [0.0; 3];
    for axis in 0..3 {
        let mut vals = axis_values(samples, axis);
        med[axis] = median(&mut vals);
        let mut devs: Vec<f64> = vals.iter().map(|v| (v - med[axis]).abs()).collect();
        mad[axis] = median(&mut devs);
    }
    samples
        .iter()
        .copied()
        .filter(|s| {
            [s.x, s.y, s.z].iter().enumerate().all(|(axis, &v)| {
                mad[axis] == 0.0 || (v - med[axis]).abs() <= MAG_OUTLIER_MAD_FACTOR * mad[axis]
            })
        })
        .collect()
}

/// Fit per-axis offset and scale from a sweep of magnetometer readings.
///
/// offset_k = (max_k + min_k) / 2; scale_k = mean_range / range_k where
/// mean_range is the per-axis range averaged over the three axes. After
/// applying the result, every axis spans the same range (the mean one),
/// centered on zero.
pub fn mag_calibrate(samples: &[Vec3]) -> Result<MagCalibration, CalibError> {
    if samples.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    let kept = filter_outliers(samples);
    if kept.len() < 2 {
        return Err(CalibError::TooFewSamples);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in &kept {
        for (axis, v) in [s.x, s.y, s.z].into_iter().enumerate() {
            lo[axis] = lo[axis].min(v);
            hi[axis] = hi[axis].max(v);
        }
    }
    let ranges = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    for (axis, range) in ranges.iter().enumerate() {
        if *range <= 0.0 {
            return Err(CalibError::DegenerateAxis { axis: [b'x', b'y', b'z'][axis] as char });
        }
    }
    let mean_range = (ranges[0] + ranges[1] + ranges[2]) / 3.0;
    Ok(MagCalibration {
        offset: Vec3::new(
            0.5 * (hi[0] + lo[0]),
            0.5 * (hi[1] + lo[1]),
            0.5 * (hi[2] + lo[2]),
        ),
        scale: Vec3::new(
            mean_range / ranges[0],
            mean_range / ranges[1],
            mean_range / ranges[2],
        ),
    })
}

/// (m - offset) * scale, per axis.
pub fn apply_mag_calibration(c: &MagCalibration, m: Vec3) -> Vec3 {
    Vec3::new(
        (m.x - c.offset.x) * c.scale.x,
        (m.y - c.offset.y) * c.scale.y,
        (m.z - c.offset.z) * c.scale.z,
    )
}

/// R_rel = neutral^-1 * raw. The inverse is the transpose since both are
/// proper rotations.
pub fn relative_rotation(neutral: &RotationMatrix, raw: &RotationMatrix) -> RotationMatrix {
    neutral.transpose().multiply(raw)
}

/// a_align = raw_R^-1 * a_raw: re-express a sensor-frame acceleration in the
/// world frame using the sensor's world-to-sensor orientation.
pub fn align_acceleration(raw_r: &RotationMatrix, a_raw: Vec3) -> Vec3 {
    raw_r.transpose().apply(a_raw)
}

/// Cancel rigid head motion for one frame: every non-auxiliary sensor is
/// premultiplied by the inverse of the auxiliary relative rotation; the
/// auxiliary slot passes through unchanged.
pub fn head_compensate_frame(
    aux_index: usize,
    rels: &[RotationMatrix],
    aligned: &[Vec3],
    acc_mode: AccHeadComp,
) -> Result<Vec<(RotationMatrix, Vec3)>, CalibError> {
    if aux_index >= rels.len() || rels.len() != aligned.len() {
        return Err(CalibError::MissingAux { aux: aux_index, count: rels.len().min(aligned.len()) });
    }
    let head_inv = rels[aux_index].transpose();
    let head = &rels[aux_index];
    Ok(rels
        .iter()
        .zip(aligned)
        .enumerate()
        .map(|(i, (rel, &a))| {
            if i == aux_index {
                (*rel, a)
            } else {
                let r = head_inv.multiply(rel);
                let a = match acc_mode {
                    AccHeadComp::Literal => head_inv.apply(a),
                    AccHeadComp::Inverse => head.apply(a),
                };
                (r, a)
            }
        })
        .collect())
}

/// Full per-frame calibration of a raw sequence. Purely frame-local; no
/// temporal smoothing. Output quaternions are unit and canonicalized.
pub fn calibrate_sequence(
    profile: &CalibrationProfile,
    raw: &RawSequence,
    acc_mode: AccHeadComp,
) -> Result<CalibratedSequence, CalibError> {
    profile.validate()?;
    raw.validate_shape()?;
    if profile.neutral.len() != raw.num_sensors() {
        return Err(CalibError::SensorCountMismatch {
            profile: profile.neutral.len(),
            sequence: raw.num_sensors(),
        });
    }
    let sensors = raw.num_sensors();
    let frames = raw.num_frames();
    let mut out: Vec<Vec<ImuSample>> = (0..sensors).map(|_| Vec::with_capacity(frames)).collect();
    let mut rels = Vec::with_capacity(sensors);
    let mut aligned = Vec::with_capacity(sensors);
    for frame in 0..frames {
        rels.clear();
        aligned.clear();
        for sensor in 0..sensors {
            let s = &raw.samples[sensor][frame];
            let raw_r = s
                .q
                .to_matrix()
                .map_err(|source| CalibError::BadOrientation { sensor, frame, source })?;
            rels.push(relative_rotation(&profile.neutral[sensor], &raw_r));
            aligned.push(align_acceleration(&raw_r, s.a));
        }
        let compensated = head_compensate_frame(profile.aux_index, &rels, &aligned, acc_mode)?;
        for (sensor, (r, a)) in compensated.into_iter().enumerate() {
            let q = r
                .to_quaternion()
                .map_err(|source| CalibError::BadOrientation { sensor, frame, source })?;
            out[sensor].push(ImuSample { q, a });
        }
    }
    Ok(CalibratedSequence { samples: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::rng::SeededRng;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn corners(xr: (f64, f64), yr: (f64, f64), zr: (f64, f64)) -> Vec<Vec3> {
        let mut out = Vec::new();
        for &x in &[xr.0, xr.1] {
            for &y in &[yr.0, yr.1] {
                for &z in &[zr.0, zr.1] {
                    out.push(v(x, y, z));
                }
            }
        }
        out
    }

    fn random_rotation(rng: &mut SeededRng) -> RotationMatrix {
        let axis = v(rng.normal(), rng.normal(), rng.normal() + 0.01);
        RotationMatrix::from_axis_angle(axis, rng.range(-3.0, 3.0))
    }

    #[test]
    fn symmetric_ranges_give_identity_calibration() {
        let cal = mag_calibrate(&corners((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0))).unwrap();
        assert_abs_diff_eq!(cal.offset.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.offset.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.offset.z, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.scale.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.scale.y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.scale.z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn worked_range_example() {
        // x in [1,3], y in [-2,2], z in [-1,1]: ranges 2, 4, 2; mean 8/3.
        let cal = mag_calibrate(&corners((1.0, 3.0), (-2.0, 2.0), (-1.0, 1.0))).unwrap();
        assert_abs_diff_eq!(cal.offset.x, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.offset.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.offset.z, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.scale.x, 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.scale.y, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cal.scale.z, 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn outlier_does_not_move_the_fit() {
        let clean = corners((1.0, 3.0), (-2.0, 2.0), (-1.0, 1.0));
        let expect = mag_calibrate(&clean).unwrap();
        let mut dirty = clean;
        dirty.push(v(100.0, 100.0, 100.0));
        let got = mag_calibrate(&dirty).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn degenerate_axis_is_named() {
        let samples = vec![v(0.0, 5.0, -1.0), v(1.0, 5.0, 1.0), v(2.0, 5.0, 0.0)];
        match mag_calibrate(&samples) {
            Err(CalibError::DegenerateAxis { axis }) => assert_eq!(axis, 'y'),
            other => panic!("expected degenerate-axis error, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(mag_calibrate(&[]), Err(CalibError::EmptyInput));
    }

    #[test]
    fn apply_examples() {
        let cal = MagCalibration {
            offset: v(2.0, 0.0, 0.0),
            scale: v(4.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0),
        };
        let at_offset = apply_mag_calibration(&cal, cal.offset);
        assert_eq!(at_offset, Vec3::ZERO);
        let id = MagCalibration::identity();
        assert_eq!(apply_mag_calibration(&id, v(0.3, -0.7, 2.0)), v(0.3, -0.7, 2.0));
        let got = apply_mag_calibration(&cal, v(3.0, 2.0, 1.0));
        assert_abs_diff_eq!(got.x, 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got.y, 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got.z, 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn calibration_equalizes_ranges() {
        let mut rng = SeededRng::new(9);
        let samples: Vec<Vec3> = (0..500)
            .map(|_| v(rng.range(-3.0, 9.0), rng.range(-0.5, 0.5), rng.range(10.0, 14.0)))
            .collect();
        let cal = mag_calibrate(&samples).unwrap();
        let mapped: Vec<Vec3> = samples.iter().map(|&s| apply_mag_calibration(&cal, s)).collect();
        for axis in 0..3 {
            let vals = axis_values(&mapped, axis);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean_range = {
                let mut acc = 0.0;
                for a in 0..3 {
                    let vs = axis_values(&samples, a);
                    let l = vs.iter().cloned().fold(f64::INFINITY, f64::min);
                    let h = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    acc += h - l;
                }
                acc / 3.0
            };
            assert_abs_diff_eq!(hi - lo, mean_range, epsilon = 1e-9);
            assert_abs_diff_eq!(hi + lo, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn relative_rotation_cases() {
        let mut rng = SeededRng::new(21);
        let neutral = random_rotation(&mut rng);
        assert!(relative_rotation(&neutral, &neutral)
            .frobenius_distance(&RotationMatrix::IDENTITY) < 1e-12);
        let raw = random_rotation(&mut rng);
        assert!(relative_rotation(&RotationMatrix::IDENTITY, &raw).frobenius_distance(&raw) < 1e-15);
        let direct = neutral.transpose().multiply(&raw);
        assert!(relative_rotation(&neutral, &raw).frobenius_distance(&direct) < 1e-12);
    }

    #[test]
    fn align_acceleration_cases() {
        assert_eq!(
            align_acceleration(&RotationMatrix::IDENTITY, v(0.1, 0.2, 0.3)),
            v(0.1, 0.2, 0.3)
        );
        let quarter_z = RotationMatrix::from_axis_angle(v(0.0, 0.0, 1.0), core::f64::consts::FRAC_PI_2);
        let got = align_acceleration(&quarter_z, v(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(got.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got.y, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got.z, 0.0, epsilon = 1e-12);
        let mut rng = SeededRng::new(33);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let a = v(rng.normal(), rng.normal(), rng.normal());
            assert_abs_diff_eq!(align_acceleration(&r, a).norm(), a.norm(), epsilon = 1e-12);
        }
    }

    #[test]
    fn head_compensation_identity_cases() {
        let mut rng = SeededRng::new(55);
        let g = random_rotation(&mut rng);
        // All relative rotations equal: non-auxiliary outputs collapse to I.
        let rels = vec![g, g, g, g];
        let aligned = vec![Vec3::ZERO; 4];
        let out = head_compensate_frame(0, &rels, &aligned, AccHeadComp::Literal).unwrap();
        for (i, (r, _)) in out.iter().enumerate() {
            if i == 0 {
                assert!(r.frobenius_distance(&g) < 1e-15);
            } else {
                assert!(r.frobenius_distance(&RotationMatrix::IDENTITY) < 1e-9);
            }
        }
        // Auxiliary at identity: passthrough.
        let rels = vec![RotationMatrix::IDENTITY, random_rotation(&mut rng), random_rotation(&mut rng)];
        let aligned = vec![v(0.0, 0.0, 0.0), v(1.0, 2.0, 3.0), v(-1.0, 0.5, 0.0)];
        let out = head_compensate_frame(0, &rels, &aligned, AccHeadComp::Literal).unwrap();
        for (i, (r, a)) in out.iter().enumerate() {
            assert!(r.frobenius_distance(&rels[i]) < 1e-12);
            assert_abs_diff_eq!((*a - aligned[i]).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn head_compensation_matches_direct_products() {
        let mut rng = SeededRng::new(77);
        for _ in 0..50 {
            let rels: Vec<RotationMatrix> = (0..5).map(|_| random_rotation(&mut rng)).collect();
            let aligned: Vec<Vec3> =
                (0..5).map(|_| v(rng.normal(), rng.normal(), rng.normal())).collect();
            let out = head_compensate_frame(0, &rels, &aligned, AccHeadComp::Literal).unwrap();
            let head_inv = rels[0].transpose();
            for i in 1..5 {
                let want_r = head_inv.multiply(&rels[i]);
                let want_a = head_inv.apply(aligned[i]);
                assert!(out[i].0.frobenius_distance(&want_r) < 1e-12);
                assert_abs_diff_eq!((out[i].1 - want_a).norm(), 0.0, epsilon = 1e-12);
            }
            let inv = head_compensate_frame(0, &rels, &aligned, AccHeadComp::Inverse).unwrap();
            for i in 1..5 {
                let want_a = rels[0].apply(aligned[i]);
                assert_abs_diff_eq!((inv[i].1 - want_a).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn missing_aux_rejected() {
        let rels = vec![RotationMatrix::IDENTITY];
        let aligned = vec![Vec3::ZERO];
        assert!(matches!(
            head_compensate_frame(3, &rels, &aligned, AccHeadComp::Literal),
            Err(CalibError::MissingAux { .. })
        ));
    }

    fn profile_of(neutrals: Vec<RotationMatrix>) -> CalibrationProfile {
        let mag = vec![MagCalibration::identity(); neutrals.len()];
        CalibrationProfile { neutral: neutrals, aux_index: 0, mag }
    }

    #[test]
    fn neutral_pose_calibrates_to_identity() {
        let mut rng = SeededRng::new(4);
        let neutrals: Vec<RotationMatrix> = (0..4).map(|_| random_rotation(&mut rng)).collect();
        let raw = RawSequence {
            samples: neutrals
                .iter()
                .map(|n| {
                    let q = n.to_quaternion().unwrap();
                    vec![ImuSample { q, a: Vec3::ZERO }; 10]
                })
                .collect(),
        };
        let out = calibrate_sequence(&profile_of(neutrals), &raw, AccHeadComp::Literal).unwrap();
        for track in &out.samples {
            for s in track {
                assert!(s.q.dot(Quaternion::IDENTITY).abs() > 1.0 - 1e-9);
                assert_abs_diff_eq!(s.a.norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    /// Build raw orientations for a rigid head rotation G_t: every sensor's
    /// world-to-sensor matrix becomes R_neutral * G_t^-1.
    fn rigid_motion_raw(
        neutrals: &[RotationMatrix],
        gs: &[RotationMatrix],
    ) -> RawSequence {
        RawSequence {
            samples: neutrals
                .iter()
                .map(|n| {
                    gs.iter()
                        .map(|g| {
                            let q = n.multiply(&g.transpose()).to_quaternion().unwrap();
                            ImuSample { q, a: Vec3::ZERO }
                        })
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn rigid_head_motion_cancels_exactly() {
        let mut rng = SeededRng::new(8);
        for _ in 0..20 {
            let neutrals: Vec<RotationMatrix> = (0..6).map(|_| random_rotation(&mut rng)).collect();
            let gs: Vec<RotationMatrix> = (0..30).map(|_| random_rotation(&mut rng)).collect();
            let raw = rigid_motion_raw(&neutrals, &gs);
            let out = calibrate_sequence(&profile_of(neutrals), &raw, AccHeadComp::Literal).unwrap();
            for (sensor, track) in out.samples.iter().enumerate() {
                if sensor == 0 {
                    continue;
                }
                for s in track {
                    let m = s.q.to_matrix().unwrap();
                    assert!(
                        m.frobenius_distance(&RotationMatrix::IDENTITY) < 1e-9,
                        "sensor {sensor}"
                    );
                }
            }
        }
    }

    #[test]
    fn aux_at_neutral_reduces_to_per_sensor_calibration() {
        let mut rng = SeededRng::new(12);
        let neutrals: Vec<RotationMatrix> = (0..4).map(|_| random_rotation(&mut rng)).collect();
        let frames = 8;
        let mut samples: Vec<Vec<ImuSample>> = Vec::new();
        for (i, n) in neutrals.iter().enumerate() {
            let mut track = Vec::new();
            for _ in 0..frames {
                let q = if i == 0 {
                    n.to_quaternion().unwrap() // aux pinned at neutral
                } else {
                    random_rotation(&mut rng).to_quaternion().unwrap()
                };
                track.push(ImuSample { q, a: v(rng.normal(), rng.normal(), rng.normal()) });
            }
            samples.push(track);
        }
        let raw = RawSequence { samples };
        let full =
            calibrate_sequence(&profile_of(neutrals.clone()), &raw, AccHeadComp::Literal).unwrap();
        for sensor in 1..4 {
            for frame in 0..frames {
                let s = &raw.samples[sensor][frame];
                let raw_r = s.q.to_matrix().unwrap();
                let rel = relative_rotation(&neutrals[sensor], &raw_r);
                let want_q = rel.to_quaternion().unwrap();
                let want_a = align_acceleration(&raw_r, s.a);
                let got = &full.samples[sensor][frame];
                assert!(got.q.dot(want_q).abs() > 1.0 - 1e-9);
                assert_abs_diff_eq!((got.a - want_a).norm(), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn frame_count_mismatch_rejected() {
        let raw = RawSequence {
            samples: vec![vec![ImuSample::identity(); 3], vec![ImuSample::identity(); 2]],
        };
        let profile = profile_of(vec![RotationMatrix::IDENTITY, RotationMatrix::IDENTITY]);
        assert!(matches!(
            calibrate_sequence(&profile, &raw, AccHeadComp::Literal),
            Err(CalibError::FrameCountMismatch { sensor: 1, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cancellation_holds_for_arbitrary_seeds(seed in 0u64..1_000_000) {
            let mut rng = SeededRng::new(seed);
            let neutrals: Vec<RotationMatrix> = (0..3).map(|_| random_rotation(&mut rng)).collect();
            let gs: Vec<RotationMatrix> = (0..5).map(|_| random_rotation(&mut rng)).collect();
            let raw = rigid_motion_raw(&neutrals, &gs);
            let out = calibrate_sequence(&profile_of(neutrals), &raw, AccHeadComp::Literal).unwrap();
            for track in out.samples.iter().skip(1) {
                for s in track {
                    let m = s.q.to_matrix().unwrap();
                    prop_assert!(m.frobenius_distance(&RotationMatrix::IDENTITY) < 1e-9);
                }
            }
        }

        #[test]
        fn calibrated_outputs_are_proper(seed in 0u64..1_000_000) {
            let mut rng = SeededRng::new(seed);
            let neutrals: Vec<RotationMatrix> = (0..3).map(|_| random_rotation(&mut rng)).collect();
            let raw = RawSequence {
                samples: (0..3)
                    .map(|_| {
                        (0..4)
                            .map(|_| ImuSample {
                                q: random_rotation(&mut rng).to_quaternion().unwrap(),
                                a: v(rng.normal(), rng.normal(), rng.normal()),
                            })
                            .collect()
                    })
                    .collect(),
            };
            let out = calibrate_sequence(&profile_of(neutrals), &raw, AccHeadComp::Literal).unwrap();
            for track in &out.samples {
                for s in track {
                    prop_assert!((s.q.norm() - 1.0).abs() < 1e-9);
                    prop_assert!(s.q.w >= 0.0);
                }
            }
        }
    }
}
