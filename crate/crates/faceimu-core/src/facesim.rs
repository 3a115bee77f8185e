//! Blendshape mesh evaluation and synthetic facial-IMU signal generation.
//!
//! A [`BlendshapeRig`] is a neutral mesh plus m delta shapes: the mesh for a
//! weight row w is M(w) = B_0 + sum_k w_k * B_k. Sensors are anchored to mesh
//! vertices; from a mesh trajectory we synthesize what each anchored IMU
//! would measure. Acceleration is a central second difference over +/- n
//! frames; orientation is a frame built from the anchor vertex's two support
//! edges. Vertex positions are millimeters; synthesized accelerations are
//! converted to m/s^2.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::calib::{CalibrationProfile, ImuSample, MagCalibration, RawSequence};
use crate::geom::{GeomError, RotationMatrix, Vec3};
use crate::rng::SeededRng;

pub mod synthetic;

/// Default central-difference half-width (frames).
pub const DEFAULT_SMOOTHING: usize = 2;
pub const DEFAULT_FPS: f64 = 60.0;

const MM_TO_M: f64 = 1e-3;
/// Support edges with a cross product smaller than this are degenerate.
const COLLINEAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("weight row has {got} entries, rig has {expected} blendshapes")]
    WeightLengthMismatch { expected: usize, got: usize },
    #[error("rig has no blendshape deltas")]
    EmptyRig,
    #[error("delta {index} has {got} vertices, neutral mesh has {expected}")]
    DeltaLengthMismatch { index: usize, expected: usize, got: usize },
    #[error("vertex index {vertex} out of range ({count} vertices)")]
    VertexOutOfRange { vertex: usize, count: usize },
    #[error("frame index {frame} out of range ({count} frames)")]
    FrameOutOfRange { frame: usize, count: usize },
    #[error("anchor for sensor {sensor}: support edges are collinear (cross norm {norm:.3e})")]
    DegenerateAnchor { sensor: usize, norm: f64 },
    #[error("anchor sensor ids must be exactly 1..={count}, found id {id}")]
    BadSensorIds { count: usize, id: usize },
    #[error("head-motion track has {got} frames, weights have {expected}")]
    HeadTrackMismatch { expected: usize, got: usize },
    #[error("sequence of {frames} frames too short for smoothing n={n} (needs {min})")]
    SequenceTooShort { frames: usize, n: usize, min: usize },
    #[error("smoothing constant n must be at least 1")]
    ZeroSmoothing,
    #[error("frame {frame}, sensor {sensor}: {source}")]
    BadFrame { frame: usize, sensor: usize, source: GeomError },
}

/// Denominator of the simulated-acceleration central difference.
///
/// `Squared` divides by (n*tau)^2, the dimensionally consistent second
/// difference, and is the default. `Linear` divides by n*tau, which yields
/// velocity units; it is kept selectable so both variants can be compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccelDenominator {
    #[default]
    Squared,
    Linear,
}

/// How the per-anchor orientation frame is assembled from the support edges
/// e1 = norm(v - sup1), e2 = norm(v - sup2).
///
/// `Orthonormal` (default) returns the proper rotation with columns
/// [e1, n x e1, n], n = norm(e1 x e2). `Literal` returns columns
/// [e1, norm(e1 x e2), norm((e1 x e2) x e2)] verbatim; that matrix is NOT
/// orthonormal in general (for perpendicular edges its third column
/// collapses onto -e1 and the determinant is zero), so it cannot feed the
/// quaternion pipeline and exists only for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrientationFrame {
    #[default]
    Orthonormal,
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    /// 1-based data-sensor id; id 0 is reserved for the auxiliary IMU.
    pub sensor_id: usize,
    pub vertex: usize,
    /// Two vertices forming a mesh face with `vertex`.
    pub supports: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeRig {
    /// B_0, millimeters.
    pub neutral: Vec<Vec3>,
    /// Delta shapes B_k, each the same length as `neutral`.
    pub deltas: Vec<Vec<Vec3>>,
    /// Vertex ids scored by the landmark error metric.
    pub landmarks: Vec<usize>,
    pub anchors: Vec<Anchor>,
}

impl BlendshapeRig {
    pub fn m(&self) -> usize {
        self.deltas.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.neutral.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.deltas.is_empty() {
            return Err(SimError::EmptyRig);
        }
        let count = self.neutral.len();
        for (index, delta) in self.deltas.iter().enumerate() {
            if delta.len() != count {
                return Err(SimError::DeltaLengthMismatch { index, expected: count, got: delta.len() });
            }
        }
        for &v in &self.landmarks {
            if v >= count {
                return Err(SimError::VertexOutOfRange { vertex: v, count });
            }
        }
        let n_anchors = self.anchors.len();
        let mut seen = vec![false; n_anchors + 1];
        for anchor in &self.anchors {
            for &v in [anchor.vertex, anchor.supports[0], anchor.supports[1]].iter() {
                if v >= count {
                    return Err(SimError::VertexOutOfRange { vertex: v, count });
                }
            }
            if anchor.sensor_id == 0 || anchor.sensor_id > n_anchors || seen[anchor.sensor_id] {
                return Err(SimError::BadSensorIds { count: n_anchors, id: anchor.sensor_id });
            }
            seen[anchor.sensor_id] = true;
            // Anchors must define a usable frame on the neutral mesh.
            simulate_orientation(&self.neutral, anchor, OrientationFrame::Orthonormal)?;
        }
        Ok(())
    }

    pub fn neutral_centroid(&self) -> Vec3 {
        let mut c = Vec3::ZERO;
        for &v in &self.neutral {
            c = c + v;
        }
        c * (1.0 / self.neutral.len() as f64)
    }
}

/// T x m weight matrix at 60 fps; the decoder's prediction target.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSequence {
    pub m: usize,
    /// One row of m weights per frame.
    pub frames: Vec<Vec<f64>>,
}

impl WeightSequence {
    pub fn zeros(m: usize, t: usize) -> Self {
        Self { m, frames: vec![vec![0.0; m]; t] }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Per-frame vertex positions (mm) with a fixed frame interval (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTrajectory {
    pub frames: Vec<Vec<Vec3>>,
    pub tau: f64,
}

/// M(w) = B_0 + sum_k w_k * B_k.
pub fn evaluate_mesh(rig: &BlendshapeRig, w: &[f64]) -> Result<Vec<Vec3>, SimError> {
    if w.len() != rig.m() {
        return Err(SimError::WeightLengthMismatch { expected: rig.m(), got: w.len() });
    }
    let mut out = rig.neutral.clone();
    for (delta, &wk) in rig.deltas.iter().zip(w) {
        if wk != 0.0 {
            for (v, d) in out.iter_mut().zip(delta) {
                *v = *v + *d * wk;
            }
        }
    }
    Ok(out)
}

/// Evaluate the rig per frame, then rotate each frame's vertices by that
/// frame's head rotation about the neutral-mesh centroid. The centroid is
/// held fixed across frames so a rigid head turn does not couple into
/// expression-driven centroid shifts.
pub fn trajectory_from_weights(
    rig: &BlendshapeRig,
    weights: &WeightSequence,
    head: Option<&[RotationMatrix]>,
    fps: f64,
) -> Result<MeshTrajectory, SimError> {
    if let Some(track) = head {
        if track.len() != weights.num_frames() {
            return Err(SimError::HeadTrackMismatch {
                expected: weights.num_frames(),
                got: track.len(),
            });
        }
    }
    let center = rig.neutral_centroid();
    let mut frames = Vec::with_capacity(weights.num_frames());
    for (j, row) in weights.frames.iter().enumerate() {
        let mut verts = evaluate_mesh(rig, row)?;
        if let Some(track) = head {
            let g = &track[j];
            for v in verts.iter_mut() {
                *v = g.apply(*v - center) + center;
            }
        }
        frames.push(verts);
    }
    Ok(MeshTrajectory { frames, tau: 1.0 / fps })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatedAccel {
    pub a: Vec3,
    /// True for frames closer than n to either end, where the central
    /// difference has no support; `a` is zero there.
    pub boundary: bool,
}

/// Central second difference (v_{j-n} + v_{j+n} - 2 v_j) over the chosen
/// denominator. Units follow the trajectory: a trajectory in mm yields
/// mm/s^2 (or mm/s in `Linear` mode).
pub fn simulate_acceleration(
    traj: &MeshTrajectory,
    vertex: usize,
    frame: usize,
    n: usize,
    mode: AccelDenominator,
) -> Result<SimulatedAccel, SimError> {
    if n == 0 {
        return Err(SimError::ZeroSmoothing);
    }
    let frames = traj.frames.len();
    if frame >= frames {
        return Err(SimError::FrameOutOfRange { frame, count: frames });
    }
    let count = traj.frames[frame].len();
    if vertex >= count {
        return Err(SimError::VertexOutOfRange { vertex, count });
    }
    if frame < n || frame + n >= frames {
        return Ok(SimulatedAccel { a: Vec3::ZERO, boundary: true });
    }
    let prev = traj.frames[frame - n][vertex];
    let next = traj.frames[frame + n][vertex];
    let here = traj.frames[frame][vertex];
    let numerator = prev + next - here * 2.0;
    let ntau = n as f64 * traj.tau;
    let denom = match mode {
        AccelDenominator::Squared => ntau * ntau,
        AccelDenominator::Linear => ntau,
    };
    Ok(SimulatedAccel { a: numerator * (1.0 / denom), boundary: false })
}

/// Build the sensor frame at one anchor from one mesh frame. Columns are the
/// sensor axes expressed in world coordinates (sensor-to-world); see
/// [`OrientationFrame`] for the two assembly modes.
pub fn simulate_orientation(
    vertices: &[Vec3],
    anchor: &Anchor,
    mode: OrientationFrame,
) -> Result<RotationMatrix, SimError> {
    let count = vertices.len();
    for &v in [anchor.vertex, anchor.supports[0], anchor.supports[1]].iter() {
        if v >= count {
            return Err(SimError::VertexOutOfRange { vertex: v, count });
        }
    }
    let v = vertices[anchor.vertex];
    let d1 = v - vertices[anchor.supports[0]];
    let d2 = v - vertices[anchor.supports[1]];
    if d1.norm() < COLLINEAR_TOL || d2.norm() < COLLINEAR_TOL {
        return Err(SimError::DegenerateAnchor { sensor: anchor.sensor_id, norm: 0.0 });
    }
    let e1 = d1.normalized();
    let e2 = d2.normalized();
    let cross = e1.cross(e2);
    let cross_norm = cross.norm();
    if cross_norm < COLLINEAR_TOL {
        return Err(SimError::DegenerateAnchor { sensor: anchor.sensor_id, norm: cross_norm });
    }
    match mode {
        OrientationFrame::Orthonormal => {
            let n = cross * (1.0 / cross_norm);
            Ok(RotationMatrix::from_columns(e1, n.cross(e1), n))
        }
        OrientationFrame::Literal => {
            let c2 = cross * (1.0 / cross_norm);
            let c3 = cross.cross(e2).normalized();
            Ok(RotationMatrix::from_columns(e1, c2, c3))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    /// Central-difference half-width, frames.
    pub n: usize,
    pub fps: f64,
    pub denominator: AccelDenominator,
    pub orientation: OrientationFrame,
    /// Std-dev of additive Gaussian acceleration noise, m/s^2. Zero = off.
    pub accel_noise_std: f64,
    /// Std-dev of random small-angle orientation perturbations, radians.
    pub orient_noise_std: f64,
    pub seed: u64,
    /// Head-frame position of the auxiliary IMU (mm): a virtual point rigid
    /// with the skull, not a mesh vertex. Default sits behind the right ear.
    pub aux_position: Vec3,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_SMOOTHING,
            fps: DEFAULT_FPS,
            denominator: AccelDenominator::default(),
            orientation: OrientationFrame::default(),
            accel_noise_std: 0.0,
            orient_noise_std: 0.0,
            seed: 0,
            aux_position: Vec3::new(80.0, 10.0, -30.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    /// Sensor 0 is the auxiliary IMU; anchors fill ids 1..=N.
    pub raw: RawSequence,
    /// Neutral profile measured from the w=0, identity-head pose (noise-free).
    pub profile: CalibrationProfile,
    /// Frames whose accelerations are zeroed boundary fills.
    pub boundary_frames: Vec<usize>,
}

/// Synthesize the raw IMU signal a rig would produce for a weight sequence
/// and optional head-motion track.
///
/// Orientations are converted to world-to-sensor quaternions, so `Literal`
/// orientation mode fails here (its frames are not rotations); the error is
/// propagated rather than papered over.
pub fn simulate_sequence(
    rig: &BlendshapeRig,
    weights: &WeightSequence,
    head: Option<&[RotationMatrix]>,
    config: &SimulationConfig,
) -> Result<SimulationOutput, SimError> {
    rig.validate()?;
    if config.n == 0 {
        return Err(SimError::ZeroSmoothing);
    }
    let frames = weights.num_frames();
    let min = 2 * config.n + 1;
    if frames < min {
        return Err(SimError::SequenceTooShort { frames, n: config.n, min });
    }
    let traj = trajectory_from_weights(rig, weights, head, config.fps)?;
    let center = rig.neutral_centroid();

    // Virtual auxiliary-point trajectory: rigid with the head.
    let aux_track: Vec<Vec3> = (0..frames)
        .map(|j| match head {
            Some(track) => track[j].apply(config.aux_position - center) + center,
            None => config.aux_position,
        })
        .collect();
    let aux_traj = MeshTrajectory { frames: aux_track.iter().map(|&p| vec![p]).collect(), tau: traj.tau };

    // Neutral profile from the clean neutral pose: w = 0, identity head.
    let neutral_mesh = evaluate_mesh(rig, &vec![0.0; rig.m()])?;
    let sensor_count = rig.anchors.len() + 1;
    let mut neutral = vec![RotationMatrix::IDENTITY; sensor_count];
    for anchor in &rig.anchors {
        let stw = simulate_orientation(&neutral_mesh, anchor, config.orientation)?;
        neutral[anchor.sensor_id] = stw.transpose();
    }
    let profile = CalibrationProfile {
        neutral,
        aux_index: 0,
        mag: vec![MagCalibration::identity(); sensor_count],
    };

    let mut rng = SeededRng::new(config.seed);
    let noisy = config.accel_noise_std > 0.0 || config.orient_noise_std > 0.0;
    let mut samples: Vec<Vec<ImuSample>> = vec![Vec::with_capacity(frames); sensor_count];
    let mut boundary_frames = Vec::new();
    for j in 0..frames {
        if j < config.n || j + config.n >= frames {
            boundary_frames.push(j);
        }
        // Auxiliary sensor: world-to-sensor orientation is the inverse head
        // rotation (its neutral mount frame is the identity).
        let aux_wts = match head {
            Some(track) => track[j].transpose(),
            None => RotationMatrix::IDENTITY,
        };
        let aux_a = simulate_acceleration(&aux_traj, 0, j, config.n, config.denominator)?.a * MM_TO_M;
        push_sample(&mut samples[0], aux_wts, aux_a, noisy, config, &mut rng, j, 0)?;

        for anchor in &rig.anchors {
            let stw = simulate_orientation(&traj.frames[j], anchor, config.orientation)?;
            let wts = stw.transpose();
            let a =
                simulate_acceleration(&traj, anchor.vertex, j, config.n, config.denominator)?.a * MM_TO_M;
            push_sample(&mut samples[anchor.sensor_id], wts, a, noisy, config, &mut rng, j, anchor.sensor_id)?;
        }
    }
    Ok(SimulationOutput { raw: RawSequence { samples }, profile, boundary_frames })
}

#[allow(clippy::too_many_arguments)]
fn push_sample(
    track: &mut Vec<ImuSample>,
    wts: RotationMatrix,
    a: Vec3,
    noisy: bool,
    config: &SimulationConfig,
    rng: &mut SeededRng,
    frame: usize,
    sensor: usize,
) -> Result<(), SimError> {
    let mut q = wts
        .to_quaternion()
        .map_err(|source| SimError::BadFrame { frame, sensor, source })?;
    let mut a = a;
    if noisy {
        if config.orient_noise_std > 0.0 {
            let axis = Vec3::new(rng.normal(), rng.normal(), rng.normal());
            let angle = rng.normal() * config.orient_noise_std;
            if axis.norm() > 1e-12 {
                q = crate::geom::Quaternion::from_axis_angle(axis, angle).multiply(q);
            }
        }
        if config.accel_noise_std > 0.0 {
            a = a
                + Vec3::new(rng.normal(), rng.normal(), rng.normal()) * config.accel_noise_std;
        }
    }
    track.push(ImuSample { q, a });
    Ok(())
}

/// Styles for [`generate_synthetic_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightStyle {
    /// Band-limited multisine per channel: random tones between 0.2 and
    /// 3 Hz plus low-amplitude texture up to 3.4 Hz, rescaled into
    /// [0.1, 0.9]. Tone frequencies snap to DFT bins of the requested
    /// length, so the spectrum is exactly band-limited below 4 Hz.
    #[default]
    SpeechLike,
    /// Sparse raised-cosine activation bursts on a near-zero baseline.
    ExpressionBurst,
    /// All-zero weights.
    Silent,
}

/// Deterministic synthetic ground-truth weights: same (m, t, seed, style)
/// always yields the same sequence, clamped to [0, 1].
pub fn generate_synthetic_weights(m: usize, t: usize, seed: u64, style: WeightStyle) -> WeightSequence {
    let mut rng = SeededRng::new(seed);
    let fps = DEFAULT_FPS;
    let mut frames = vec![vec![0.0; m]; t];
    match style {
        WeightStyle::Silent => {}
        WeightStyle::SpeechLike => {
            let bin_for = |hz: f64| (hz * t as f64 / fps).floor().max(1.0) as usize;
            let lo_bin = bin_for(0.2).max(1);
            let hi_bin = bin_for(3.0).max(lo_bin);
            let texture_hi = bin_for(3.4).max(lo_bin);
            for k in 0..m {
                let mut x = vec![0.0f64; t];
                for _ in 0..4 {
                    let bin = lo_bin + rng.below(hi_bin - lo_bin + 1);
                    let amp = rng.range(0.3, 1.0);
                    let phase = rng.range(0.0, core::f64::consts::TAU);
                    add_tone(&mut x, bin, amp, phase);
                }
                for _ in 0..6 {
                    let bin = 1 + rng.below(texture_hi);
                    let amp = rng.range(0.0, 0.05);
                    let phase = rng.range(0.0, core::f64::consts::TAU);
                    add_tone(&mut x, bin, amp, phase);
                }
                let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let span = hi - lo;
                for (j, frame) in frames.iter_mut().enumerate() {
                    let unit = if span > 1e-12 { (x[j] - lo) / span } else { 0.5 };
                    frame[k] = (0.1 + 0.8 * unit).clamp(0.0, 1.0);
                }
            }
        }
        WeightStyle::ExpressionBurst => {
            let baseline = 0.02;
            let expected_bursts = (t as f64 / fps / 2.5).ceil() as usize;
            for k in 0..m {
                let bursts = 1 + rng.below(expected_bursts.max(1));
                let mut x = vec![baseline; t];
                for _ in 0..bursts {
                    let center = rng.range(0.0, t as f64);
                    let width = rng.range(0.3, 0.8) * fps; // frames
                    let amp = rng.range(0.3, 0.9);
                    let lo = ((center - width).floor().max(0.0)) as usize;
                    let hi = ((center + width).ceil().min(t as f64 - 1.0)) as usize;
                    for (j, xj) in x.iter_mut().enumerate().take(hi + 1).skip(lo) {
                        let u = (j as f64 - center) / width;
                        if u.abs() < 1.0 {
                            // Raised cosine: smooth rise and fall.
                            *xj += amp * 0.5 * (1.0 + (core::f64::consts::PI * u).cos());
                        }
                    }
                }
                for (j, frame) in frames.iter_mut().enumerate() {
                    frame[k] = x[j].clamp(0.0, 1.0);
                }
            }
        }
    }
    WeightSequence { m, frames }
}

fn add_tone(x: &mut [f64], bin: usize, amp: f64, phase: f64) {
    let t = x.len() as f64;
    for (j, xj) in x.iter_mut().enumerate() {
        *xj += amp * (core::f64::consts::TAU * bin as f64 * j as f64 / t + phase).sin();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{calibrate_sequence, AccHeadComp};
    use crate::geom::Quaternion;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tiny_rig() -> BlendshapeRig {
        // A unit right-angle corner plus two extra vertices to displace.
        BlendshapeRig {
            neutral: alloc::vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(-1.0, 0.0, 0.0),
                Vec3::new(0.0, -1.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(2.0, 0.0, 1.0),
            ],
            deltas: alloc::vec![
                alloc::vec![Vec3::ZERO, Vec3::ZERO, Vec3::ZERO, Vec3::new(0.0, 0.0, 2.0), Vec3::ZERO],
                alloc::vec![Vec3::ZERO, Vec3::ZERO, Vec3::ZERO, Vec3::ZERO, Vec3::new(0.0, 3.0, 0.0)],
            ],
            landmarks: alloc::vec![0, 3],
            anchors: alloc::vec![Anchor { sensor_id: 1, vertex: 0, supports: [1, 2] }],
        }
    }

    #[test]
    fn zero_weights_give_neutral() {
        let rig = tiny_rig();
        let mesh = evaluate_mesh(&rig, &[0.0, 0.0]).unwrap();
        assert_eq!(mesh, rig.neutral);
    }

    #[test]
    fn one_hot_adds_one_delta() {
        let rig = tiny_rig();
        let mesh = evaluate_mesh(&rig, &[1.0, 0.0]).unwrap();
        for (i, v) in mesh.iter().enumerate() {
            let want = rig.neutral[i] + rig.deltas[0][i];
            assert_abs_diff_eq!((*v - want).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn half_half_matches_elementwise_oracle() {
        let rig = tiny_rig();
        let w = [0.5, 0.5];
        let mesh = evaluate_mesh(&rig, &w).unwrap();
        for i in 0..rig.vertex_count() {
            let want = rig.neutral[i] + rig.deltas[0][i] * 0.5 + rig.deltas[1][i] * 0.5;
            assert_abs_diff_eq!((mesh[i] - want).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn weight_length_mismatch_rejected() {
        let rig = tiny_rig();
        assert!(matches!(
            evaluate_mesh(&rig, &[0.0]),
            Err(SimError::WeightLengthMismatch { expected: 2, got: 1 })
        ));
    }

    proptest! {
        #[test]
        fn mesh_is_linear_in_weights(
            w1 in (0.0f64..1.0, 0.0f64..1.0),
            w2 in (0.0f64..1.0, 0.0f64..1.0),
            alpha in -1.0f64..2.0,
            beta in -1.0f64..2.0,
        ) {
            let rig = tiny_rig();
            let a = evaluate_mesh(&rig, &[w1.0, w1.1]).unwrap();
            let b = evaluate_mesh(&rig, &[w2.0, w2.1]).unwrap();
            let mixed = evaluate_mesh(
                &rig,
                &[alpha * w1.0 + beta * w2.0, alpha * w1.1 + beta * w2.1],
            )
            .unwrap();
            for i in 0..rig.vertex_count() {
                let want = rig.neutral[i]
                    + (a[i] - rig.neutral[i]) * alpha
                    + (b[i] - rig.neutral[i]) * beta;
                prop_assert!((mixed[i] - want).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_weights_give_constant_trajectory() {
        let rig = tiny_rig();
        let weights = WeightSequence { m: 2, frames: alloc::vec![alloc::vec![0.3, 0.6]; 5] };
        let traj = trajectory_from_weights(&rig, &weights, None, 60.0).unwrap();
        for frame in &traj.frames {
            assert_eq!(frame, &traj.frames[0]);
        }
        assert_abs_diff_eq!(traj.tau, 1.0 / 60.0, epsilon = 1e-15);
    }

    #[test]
    fn identity_head_equals_plain_evaluation() {
        let rig = tiny_rig();
        let weights = generate_synthetic_weights(2, 6, 4, WeightStyle::SpeechLike);
        let head = alloc::vec![RotationMatrix::IDENTITY; 6];
        let with = trajectory_from_weights(&rig, &weights, Some(&head), 60.0).unwrap();
        let without = trajectory_from_weights(&rig, &weights, None, 60.0).unwrap();
        for (a, b) in with.frames.iter().zip(&without.frames) {
            for (va, vb) in a.iter().zip(b) {
                assert_abs_diff_eq!((*va - *vb).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn head_rotation_matches_hand_oracle() {
        let rig = tiny_rig();
        let weights = WeightSequence { m: 2, frames: alloc::vec![alloc::vec![0.0, 0.0]] };
        let quarter_z = RotationMatrix::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), core::f64::consts::FRAC_PI_2);
        let traj = trajectory_from_weights(&rig, &weights, Some(&[quarter_z]), 60.0).unwrap();
        let center = rig.neutral_centroid();
        for (i, &v) in rig.neutral.iter().enumerate() {
            let rel = v - center;
            // 90 degrees about z: (x, y) -> (-y, x).
            let want = Vec3::new(-rel.y, rel.x, rel.z) + center;
            assert_abs_diff_eq!((traj.frames[0][i] - want).norm(), 0.0, epsilon = 1e-12);
        }
    }

    fn quadratic_trajectory(accel: Vec3, frames: usize, tau: f64) -> MeshTrajectory {
        let frames = (0..frames)
            .map(|j| {
                let t = j as f64 * tau;
                alloc::vec![accel * (0.5 * t * t)]
            })
            .collect();
        MeshTrajectory { frames, tau }
    }

    #[test]
    fn constant_vertex_has_zero_acceleration() {
        let traj = MeshTrajectory { frames: alloc::vec![alloc::vec![Vec3::new(1.0, 2.0, 3.0)]; 9], tau: 1.0 / 60.0 };
        let got = simulate_acceleration(&traj, 0, 4, 2, AccelDenominator::Squared).unwrap();
        assert!(!got.boundary);
        assert_eq!(got.a, Vec3::ZERO);
    }

    #[test]
    fn quadratic_trajectory_recovers_exact_acceleration() {
        let accel = Vec3::new(0.0, 0.0, 9.8);
        let traj = quadratic_trajectory(accel, 20, 1.0 / 60.0);
        for j in 2..18 {
            let got = simulate_acceleration(&traj, 0, j, 2, AccelDenominator::Squared).unwrap();
            assert!(!got.boundary);
            assert_abs_diff_eq!((got.a - accel).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn linear_denominator_scales_by_n_tau() {
        let accel = Vec3::new(0.0, 0.0, 9.8);
        let tau = 1.0 / 60.0;
        let traj = quadratic_trajectory(accel, 20, tau);
        let got = simulate_acceleration(&traj, 0, 5, 2, AccelDenominator::Linear).unwrap();
        let want = accel * (2.0 * tau);
        assert_abs_diff_eq!((got.a - want).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn boundary_frames_are_zero_and_flagged() {
        let accel = Vec3::new(1.0, 0.0, 0.0);
        let traj = quadratic_trajectory(accel, 10, 1.0 / 60.0);
        for j in [0, 1, 8, 9] {
            let got = simulate_acceleration(&traj, 0, j, 2, AccelDenominator::Squared).unwrap();
            assert!(got.boundary);
            assert_eq!(got.a, Vec3::ZERO);
        }
    }

    #[test]
    fn acceleration_bad_indices_rejected() {
        let traj = quadratic_trajectory(Vec3::ZERO, 10, 1.0 / 60.0);
        assert!(matches!(
            simulate_acceleration(&traj, 5, 3, 2, AccelDenominator::Squared),
            Err(SimError::VertexOutOfRange { .. })
        ));
        assert!(matches!(
            simulate_acceleration(&traj, 0, 10, 2, AccelDenominator::Squared),
            Err(SimError::FrameOutOfRange { .. })
        ));
        assert!(matches!(
            simulate_acceleration(&traj, 0, 3, 0, AccelDenominator::Squared),
            Err(SimError::ZeroSmoothing)
        ));
    }

    #[test]
    fn perpendicular_edges_give_identity_frame() {
        // v = origin, sup1 at -x, sup2 at -y: e1 = +x, e2 = +y.
        let vertices = [Vec3::ZERO, Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0)];
        let anchor = Anchor { sensor_id: 1, vertex: 0, supports: [1, 2] };
        let got = simulate_orientation(&vertices, &anchor, OrientationFrame::Orthonormal).unwrap();
        assert!(got.frobenius_distance(&RotationMatrix::IDENTITY) < 1e-12);
    }

    #[test]
    fn literal_frame_is_singular_for_perpendicular_edges() {
        let vertices = [Vec3::ZERO, Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0)];
        let anchor = Anchor { sensor_id: 1, vertex: 0, supports: [1, 2] };
        let got = simulate_orientation(&vertices, &anchor, OrientationFrame::Literal).unwrap();
        let want = RotationMatrix::from_columns(
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(-1.0, 0.0, 0.0),
        );
        assert!(got.frobenius_distance(&want) < 1e-12);
        assert_abs_diff_eq!(got.det(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn collinear_supports_rejected() {
        let vertices = [Vec3::ZERO, Vec3::new(-1.0, 0.0, 0.0), Vec3::new(-2.0, 0.0, 0.0)];
        let anchor = Anchor { sensor_id: 3, vertex: 0, supports: [1, 2] };
        assert!(matches!(
            simulate_orientation(&vertices, &anchor, OrientationFrame::Orthonormal),
            Err(SimError::DegenerateAnchor { sensor: 3, .. })
        ));
    }

    #[test]
    fn random_anchors_yield_proper_rotations() {
        let mut rng = SeededRng::new(99);
        let anchor = Anchor { sensor_id: 1, vertex: 0, supports: [1, 2] };
        let mut tested = 0;
        while tested < 1000 {
            let vertices = [
                Vec3::new(rng.normal(), rng.normal(), rng.normal()),
                Vec3::new(rng.normal(), rng.normal(), rng.normal()),
                Vec3::new(rng.normal(), rng.normal(), rng.normal()),
            ];
            match simulate_orientation(&vertices, &anchor, OrientationFrame::Orthonormal) {
                Ok(m) => {
                    assert!(m.is_proper_rotation(1e-9));
                    // First column is e1 exactly.
                    let e1 = (vertices[0] - vertices[1]).normalized();
                    assert_abs_diff_eq!((m.col(0) - e1).norm(), 0.0, epsilon = 1e-12);
                    tested += 1;
                }
                Err(SimError::DegenerateAnchor { .. }) => {}
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn neutral_simulation_calibrates_to_identity() {
        let rig = synthetic::default_rig();
        let weights = WeightSequence::zeros(rig.m(), 12);
        let out = simulate_sequence(&rig, &weights, None, &SimulationConfig::default()).unwrap();
        let calibrated = calibrate_sequence(&out.profile, &out.raw, AccHeadComp::Literal).unwrap();
        for track in &calibrated.samples {
            for s in track {
                assert!(s.q.dot(Quaternion::IDENTITY).abs() > 1.0 - 1e-9);
                assert_abs_diff_eq!(s.a.norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rigid_head_motion_cancels_after_calibration() {
        let rig = synthetic::default_rig();
        let frames = 40;
        let weights = WeightSequence::zeros(rig.m(), frames);
        let head = synthetic::smooth_head_motion(frames, 11, 0.4);
        let out = simulate_sequence(&rig, &weights, Some(&head), &SimulationConfig::default()).unwrap();
        let calibrated = calibrate_sequence(&out.profile, &out.raw, AccHeadComp::Literal).unwrap();
        for (sensor, track) in calibrated.samples.iter().enumerate().skip(1) {
            for s in track {
                let m = s.q.to_matrix().unwrap();
                assert!(
                    m.frobenius_distance(&RotationMatrix::IDENTITY) < 1e-9,
                    "sensor {sensor}"
                );
            }
        }
    }

    #[test]
    fn simulated_samples_match_per_frame_oracle() {
        let rig = synthetic::default_rig();
        let weights = generate_synthetic_weights(rig.m(), 20, 7, WeightStyle::SpeechLike);
        let config = SimulationConfig::default();
        let out = simulate_sequence(&rig, &weights, None, &config).unwrap();
        let traj = trajectory_from_weights(&rig, &weights, None, config.fps).unwrap();
        for anchor in &rig.anchors {
            for j in 0..20 {
                let stw = simulate_orientation(&traj.frames[j], anchor, OrientationFrame::Orthonormal).unwrap();
                let want_q = stw.transpose().to_quaternion().unwrap();
                let want_a =
                    simulate_acceleration(&traj, anchor.vertex, j, config.n, config.denominator)
                        .unwrap()
                        .a
                        * 1e-3;
                let got = &out.raw.samples[anchor.sensor_id][j];
                assert!(got.q.dot(want_q).abs() > 1.0 - 1e-12);
                assert_abs_diff_eq!((got.a - want_a).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn literal_orientation_mode_fails_sequence_simulation() {
        let rig = synthetic::default_rig();
        let weights = WeightSequence::zeros(rig.m(), 8);
        let config = SimulationConfig { orientation: OrientationFrame::Literal, ..Default::default() };
        assert!(matches!(
            simulate_sequence(&rig, &weights, None, &config),
            Err(SimError::BadFrame { .. })
        ));
    }

    #[test]
    fn too_short_sequence_rejected() {
        let rig = synthetic::default_rig();
        let weights = WeightSequence::zeros(rig.m(), 4);
        assert!(matches!(
            simulate_sequence(&rig, &weights, None, &SimulationConfig::default()),
            Err(SimError::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn synthetic_weights_are_deterministic() {
        let a = generate_synthetic_weights(8, 100, 5, WeightStyle::SpeechLike);
        let b = generate_synthetic_weights(8, 100, 5, WeightStyle::SpeechLike);
        assert_eq!(a, b);
        let c = generate_synthetic_weights(8, 100, 6, WeightStyle::SpeechLike);
        assert_ne!(a, c);
    }

    #[test]
    fn silent_style_is_all_zero() {
        let w = generate_synthetic_weights(4, 50, 3, WeightStyle::Silent);
        assert!(w.frames.iter().all(|row| row.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn weights_stay_in_unit_interval() {
        for style in [WeightStyle::SpeechLike, WeightStyle::ExpressionBurst] {
            let w = generate_synthetic_weights(8, 400, 9, style);
            for row in &w.frames {
                for &x in row {
                    assert!((0.0..=1.0).contains(&x), "{x} out of range for {style:?}");
                }
            }
        }
    }

    #[test]
    fn speechlike_spectrum_is_band_limited() {
        let t = 1200; // 20 s at 60 fps
        let w = generate_synthetic_weights(3, t, 12, WeightStyle::SpeechLike);
        let cutoff_bin = (4.0 * t as f64 / 60.0) as usize; // 4 Hz
        for k in 0..3 {
            let series: Vec<f64> = w.frames.iter().map(|row| row[k]).collect();
            let mut low = 0.0;
            let mut high = 0.0;
            for bin in 1..t / 2 {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (j, &x) in series.iter().enumerate() {
                    let ang = core::f64::consts::TAU * bin as f64 * j as f64 / t as f64;
                    re += x * ang.cos();
                    im -= x * ang.sin();
                }
                let power = re * re + im * im;
                if bin < cutoff_bin {
                    low += power;
                } else {
                    high += power;
                }
            }
            assert!(
                high <= 1e-3 * (low + high),
                "channel {k}: {high:.3e} of {:.3e} above 4 Hz",
                low + high
            );
        }
    }

    #[test]
    fn default_rig_is_valid() {
        let rig = synthetic::default_rig();
        rig.validate().unwrap();
        assert_eq!(rig.vertex_count(), 482);
        assert_eq!(rig.m(), 8);
        assert_eq!(rig.anchors.len(), 11);
        assert!(rig.landmarks.len() >= 30);
        // All four muscle zones are represented.
        for id in 1..=11 {
            assert_ne!(synthetic::zone_name(id), "unknown");
        }
    }
}
