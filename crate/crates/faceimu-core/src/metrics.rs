//! Reconstruction metrics: per-vertex position error, landmark error,
//! weight MSE, and a placement-sensitivity score for sensor siting.

use alloc::vec::Vec;
use thiserror::Error;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::facesim::{evaluate_mesh, BlendshapeRig, SimError, WeightSequence};
use crate::geom::Vec3;

/// Placement sensitivity is reported in units of 1e-3 (m/s^2)^2, i.e.
/// the raw magnitude variance multiplied by this factor.
pub const SENSITIVITY_SCALE: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("metric input has no frames")]
    EmptyInput,
    #[error("prediction has {pred} frames, reference has {gt}")]
    FrameCountMismatch { pred: usize, gt: usize },
    #[error("frame {frame}: prediction has {pred} entries, reference has {gt}")]
    EntryCountMismatch { frame: usize, pred: usize, gt: usize },
    #[error("landmark list is empty")]
    EmptyLandmarks,
    #[error("landmark index {index} outside mesh of {vertices} vertices")]
    LandmarkOutOfRange { index: usize, vertices: usize },
    #[error("placement sensitivity needs at least 2 frames, got {got}")]
    TooFewFrames { got: usize },
    #[error("weight channel count {pred} does not match reference {gt}")]
    ChannelMismatch { pred: usize, gt: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// How the spread (std) of vertex errors is pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorSpread {
    /// Std of the per-frame mean errors across frames.
    #[default]
    AcrossFrames,
    /// Std of every per-vertex error pooled over all frames.
    AcrossVertices,
}

/// Mean, spread, and per-frame trace of a vertex-distance metric.
/// Units follow the mesh (millimeters for the built-in rig).
#[derive(Debug, Clone, PartialEq)]
pub struct PveStats {
    pub mean: f64,
    pub std: f64,
    /// Mean vertex error per frame.
    pub per_frame: Vec<f64>,
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    let n = values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn check_mesh_pair(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<(), MetricsError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if pred.len() != gt.len() {
        return Err(MetricsError::FrameCountMismatch { pred: pred.len(), gt: gt.len() });
    }
    for (frame, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(MetricsError::EntryCountMismatch { frame, pred: p.len(), gt: g.len() });
        }
        if p.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
    }
    Ok(())
}

fn pve_over(
    pred: &[Vec<Vec3>],
    gt: &[Vec<Vec3>],
    indices: Option<&[usize]>,
    spread: ErrorSpread,
) -> Result<PveStats, MetricsError> {
    check_mesh_pair(pred, gt)?;
    if let Some(idx) = indices {
        if idx.is_empty() {
            return Err(MetricsError::EmptyLandmarks);
        }
        let vertices = pred[0].len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= vertices) {
            return Err(MetricsError::LandmarkOutOfRange { index: bad, vertices });
        }
    }
    let mut per_frame = Vec::with_capacity(pred.len());
    let mut pooled = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let mut total = 0.0;
        let mut count = 0usize;
        let mut push = |pv: Vec3, gv: Vec3| {
            let d = (pv - gv).norm();
            total += d;
            count += 1;
            if spread == ErrorSpread::AcrossVertices {
                pooled.push(d);
            }
        };
        match indices {
            Some(idx) => {
                for &i in idx {
                    push(p[i], g[i]);
                }
            }
            None => {
                for (pv, gv) in p.iter().zip(g) {
                    push(*pv, *gv);
                }
            }
        }
        per_frame.push(total / count as f64);
    }
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let std = match spread {
        ErrorSpread::AcrossFrames => population_std(&per_frame, mean),
        ErrorSpread::AcrossVertices => {
            let pooled_mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
            population_std(&pooled, pooled_mean)
        }
    };
    Ok(PveStats { mean, std, per_frame })
}

/// Per-vertex position error: mean Euclidean vertex distance per frame,
/// then mean and spread across the clip.
pub fn pve(
    pred: &[Vec<Vec3>],
    gt: &[Vec<Vec3>],
    spread: ErrorSpread,
) -> Result<PveStats, MetricsError> {
    pve_over(pred, gt, None, spread)
}

/// [`pve`] restricted to the given landmark vertex indices.
pub fn pve_landmarks(
    pred: &[Vec<Vec3>],
    gt: &[Vec<Vec3>],
    landmarks: &[usize],
    spread: ErrorSpread,
) -> Result<PveStats, MetricsError> {
    pve_over(pred, gt, Some(landmarks), spread)
}

/// Mean squared error between weight sequences, with a per-frame trace.
pub fn mse_weights(
    pred: &WeightSequence,
    gt: &WeightSequence,
) -> Result<(f64, Vec<f64>), MetricsError> {
    if pred.m != gt.m {
        return Err(MetricsError::ChannelMismatch { pred: pred.m, gt: gt.m });
    }
    if pred.num_frames() == 0 || gt.num_frames() == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if pred.num_frames() != gt.num_frames() {
        return Err(MetricsError::FrameCountMismatch {
            pred: pred.num_frames(),
            gt: gt.num_frames(),
        });
    }
    let mut per_frame = Vec::with_capacity(pred.num_frames());
    for (frame, (p, g)) in pred.frames.iter().zip(&gt.frames).enumerate() {
        if p.len() != pred.m || g.len() != gt.m {
            return Err(MetricsError::EntryCountMismatch { frame, pred: p.len(), gt: g.len() });
        }
        let sq = p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.m as f64;
        per_frame.push(sq);
    }
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok((mean, per_frame))
}

/// Variance of the acceleration magnitude over a clip, scaled by
/// [`SENSITIVITY_SCALE`]. High values mark sensor sites that respond
/// strongly to the performed motion; rigid rotations of the whole
/// series leave it unchanged.
pub fn placement_sensitivity(series: &[Vec3]) -> Result<f64, MetricsError> {
    if series.len() < 2 {
        return Err(MetricsError::TooFewFrames { got: series.len() });
    }
    let mags: Vec<f64> = series.iter().map(|a| a.norm()).collect();
    let mean = mags.iter().sum::<f64>() / mags.len() as f64;
    let var = mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / mags.len() as f64;
    Ok(var * SENSITIVITY_SCALE)
}

/// Full comparison of a predicted weight sequence against a reference,
/// through a rig: vertex error over the whole mesh and over the
/// landmark subset, plus weight MSE, each with per-frame traces.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pve_mean: f64,
    pub pve_std: f64,
    pub pve_lmk_mean: f64,
    pub pve_lmk_std: f64,
    pub mse: f64,
    pub pve_trace: Vec<f64>,
    pub pve_lmk_trace: Vec<f64>,
    pub mse_trace: Vec<f64>,
}

pub fn evaluate_weight_sequences(
    rig: &BlendshapeRig,
    pred: &WeightSequence,
    gt: &WeightSequence,
) -> Result<EvalReport, MetricsError> {
    let (mse, mse_trace) = mse_weights(pred, gt)?;
    let mut pred_meshes = Vec::with_capacity(pred.num_frames());
    let mut gt_meshes = Vec::with_capacity(gt.num_frames());
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        pred_meshes.push(evaluate_mesh(rig, p)?);
        gt_meshes.push(evaluate_mesh(rig, g)?);
    }
    let full = pve(&pred_meshes, &gt_meshes, ErrorSpread::AcrossFrames)?;
    let lmk = pve_landmarks(&pred_meshes, &gt_meshes, &rig.landmarks, ErrorSpread::AcrossFrames)?;
    Ok(EvalReport {
        pve_mean: full.mean,
        pve_std: full.std,
        pve_lmk_mean: lmk.mean,
        pve_lmk_std: lmk.std,
        mse,
        pve_trace: full.per_frame,
        pve_lmk_trace: lmk.per_frame,
        mse_trace: mse_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::RotationMatrix;
    use crate::rng::SeededRng;
    use approx::assert_abs_diff_eq;
    use core::f64::consts::TAU;

    fn random_mesh(n: usize, rng: &mut SeededRng) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal())).collect()
    }

    #[test]
    fn pve_hand_case() {
        // Frame 0: distances 5 and 5; frame 1: distances 1 and 1.
        let gt = vec![
            vec![Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)],
            vec![Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)],
        ];
        let pred = vec![
            vec![Vec3::new(3.0, 4.0, 0.0), Vec3::new(1.0, 1.0, 6.0)],
            vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 1.0, 1.0)],
        ];
        let s = pve(&pred, &gt, ErrorSpread::AcrossFrames).unwrap();
        assert_abs_diff_eq!(s.mean, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std, 2.0, epsilon = 1e-12);
        assert_eq!(s.per_frame.len(), 2);
        assert_abs_diff_eq!(s.per_frame[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.per_frame[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pve_spread_modes_differ() {
        // One frame, distances 1 and 3: no spread across frames, but a
        // pooled per-vertex spread of 1.
        let gt = vec![vec![Vec3::ZERO, Vec3::ZERO]];
        let pred = vec![vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0)]];
        let frames = pve(&pred, &gt, ErrorSpread::AcrossFrames).unwrap();
        let verts = pve(&pred, &gt, ErrorSpread::AcrossVertices).unwrap();
        assert_abs_diff_eq!(frames.mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(frames.std, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(verts.mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(verts.std, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pve_matches_brute_force_oracle() {
        let mut rng = SeededRng::new(40);
        let pred: Vec<_> = (0..5).map(|_| random_mesh(7, &mut rng)).collect();
        let gt: Vec<_> = (0..5).map(|_| random_mesh(7, &mut rng)).collect();
        let s = pve(&pred, &gt, ErrorSpread::AcrossFrames).unwrap();

        let mut frame_means = Vec::new();
        for f in 0..5 {
            let mut total = 0.0;
            for v in 0..7 {
                let d = pred[f][v] - gt[f][v];
                total += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
            }
            frame_means.push(total / 7.0);
        }
        let mean = frame_means.iter().sum::<f64>() / 5.0;
        let var = frame_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(s.mean, mean, epsilon = 1e-9);
        assert_abs_diff_eq!(s.std, var.sqrt(), epsilon = 1e-9);
        for f in 0..5 {
            assert_abs_diff_eq!(s.per_frame[f], frame_means[f], epsilon = 1e-9);
        }
    }

    #[test]
    fn pve_is_rigid_motion_invariant() {
        let mut rng = SeededRng::new(41);
        let pred: Vec<_> = (0..4).map(|_| random_mesh(6, &mut rng)).collect();
        let gt: Vec<_> = (0..4).map(|_| random_mesh(6, &mut rng)).collect();
        let base = pve(&pred, &gt, ErrorSpread::AcrossFrames).unwrap();

        let rot = RotationMatrix::from_axis_angle(Vec3::new(1.0, 2.0, -0.5).normalized(), 1.1);
        let shift = Vec3::new(4.0, -7.0, 2.5);
        let move_all = |m: &[Vec<Vec3>]| -> Vec<Vec<Vec3>> {
            m.iter()
                .map(|f| f.iter().map(|&v| rot.apply(v) + shift).collect())
                .collect()
        };
        let moved = pve(&move_all(&pred), &move_all(&gt), ErrorSpread::AcrossFrames).unwrap();
        assert_abs_diff_eq!(moved.mean, base.mean, epsilon = 1e-9);
        assert_abs_diff_eq!(moved.std, base.std, epsilon = 1e-9);
    }

    #[test]
    fn pve_identical_meshes_are_zero() {
        let mut rng = SeededRng::new(42);
        let m: Vec<_> = (0..3).map(|_| random_mesh(5, &mut rng)).collect();
        let s = pve(&m, &m, ErrorSpread::AcrossFrames).unwrap();
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn pve_input_validation() {
        let mesh = vec![vec![Vec3::ZERO]];
        assert!(matches!(pve(&[], &[], ErrorSpread::AcrossFrames), Err(MetricsError::EmptyInput)));
        let two = vec![vec![Vec3::ZERO], vec![Vec3::ZERO]];
        assert!(matches!(
            pve(&mesh, &two, ErrorSpread::AcrossFrames),
            Err(MetricsError::FrameCountMismatch { pred: 1, gt: 2 })
        ));
        let wide = vec![vec![Vec3::ZERO, Vec3::ZERO]];
        assert!(matches!(
            pve(&mesh, &wide, ErrorSpread::AcrossFrames),
            Err(MetricsError::EntryCountMismatch { frame: 0, pred: 1, gt: 2 })
        ));
    }

    #[test]
    fn landmark_restriction() {
        let gt = vec![vec![Vec3::ZERO, Vec3::ZERO, Vec3::ZERO]];
        let pred = vec![vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ]];
        let all = pve(&pred, &gt, ErrorSpread::AcrossFrames).unwrap();
        assert_abs_diff_eq!(all.mean, 8.0 / 3.0, epsilon = 1e-12);
        let lmk = pve_landmarks(&pred, &gt, &[0, 2], ErrorSpread::AcrossFrames).unwrap();
        assert_abs_diff_eq!(lmk.mean, 1.5, epsilon = 1e-12);

        assert!(matches!(
            pve_landmarks(&pred, &gt, &[], ErrorSpread::AcrossFrames),
            Err(MetricsError::EmptyLandmarks)
        ));
        assert!(matches!(
            pve_landmarks(&pred, &gt, &[3], ErrorSpread::AcrossFrames),
            Err(MetricsError::LandmarkOutOfRange { index: 3, vertices: 3 })
        ));
    }

    #[test]
    fn mse_weights_oracle_and_symmetry() {
        let a = WeightSequence { m: 2, frames: vec![vec![0.0, 1.0], vec![0.5, 0.5]] };
        let b = WeightSequence { m: 2, frames: vec![vec![1.0, 1.0], vec![0.5, 0.0]] };
        let (mab, trace) = mse_weights(&a, &b).unwrap();
        // Frame 0: (1 + 0)/2 = 0.5; frame 1: (0 + 0.25)/2 = 0.125.
        assert_abs_diff_eq!(trace[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(trace[1], 0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(mab, 0.3125, epsilon = 1e-12);
        let (mba, _) = mse_weights(&b, &a).unwrap();
        assert_abs_diff_eq!(mab, mba, epsilon = 0.0);
        let (zero, _) = mse_weights(&a, &a).unwrap();
        assert_eq!(zero, 0.0);
        assert!(mab >= 0.0);

        let c = WeightSequence { m: 3, frames: vec![vec![0.0; 3]] };
        assert!(matches!(
            mse_weights(&a, &c),
            Err(MetricsError::ChannelMismatch { pred: 2, gt: 3 })
        ));
    }

    #[test]
    fn sensitivity_alternating_magnitudes() {
        // Magnitudes 0, 2, 0, 2: population variance 1, reported 1000.
        let series = vec![
            Vec3::ZERO,
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::ZERO,
            Vec3::new(0.0, 2.0, 0.0),
        ];
        assert_abs_diff_eq!(placement_sensitivity(&series).unwrap(), 1000.0, epsilon = 1e-9);

        let flat = vec![Vec3::new(1.0, 2.0, 2.0); 10];
        assert_abs_diff_eq!(placement_sensitivity(&flat).unwrap(), 0.0, epsilon = 1e-12);

        assert!(matches!(
            placement_sensitivity(&[Vec3::ZERO]),
            Err(MetricsError::TooFewFrames { got: 1 })
        ));
    }

    #[test]
    fn sensitivity_matches_sinusoid_analytics() {
        // 10 s at 60 fps, magnitude c + A sin(2 pi f t) with whole
        // periods in the clip: variance A^2 / 2.
        let fps = 60.0;
        let frames = 600;
        let amp = 3.0;
        let offset = 12.0;
        let freq = 2.0;
        let series: Vec<Vec3> = (0..frames)
            .map(|i| {
                let t = i as f64 / fps;
                let m = offset + amp * (TAU * freq * t).sin();
                // Spin the direction too: only the magnitude matters.
                let dir = Vec3::new((0.7 * t).cos(), (0.7 * t).sin(), 0.5).normalized();
                dir * m
            })
            .collect();
        let got = placement_sensitivity(&series).unwrap();
        let want = amp * amp / 2.0 * SENSITIVITY_SCALE;
        assert!((got - want).abs() / want < 0.01, "got {got}, want {want}");
    }

    #[test]
    fn sensitivity_is_rotation_invariant() {
        let mut rng = SeededRng::new(43);
        let series: Vec<Vec3> =
            (0..50).map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let base = placement_sensitivity(&series).unwrap();
        let rot = RotationMatrix::from_axis_angle(Vec3::new(0.3, -1.0, 0.8).normalized(), 2.2);
        let rotated: Vec<Vec3> = series.iter().map(|&v| rot.apply(v)).collect();
        assert_abs_diff_eq!(placement_sensitivity(&rotated).unwrap(), base, epsilon = 1e-9);
    }

    #[test]
    fn eval_report_traces_and_zero_case() {
        let rig = crate::facesim::synthetic::default_rig();
        let mut rng = SeededRng::new(44);
        let frames = 4;
        let gt = WeightSequence {
            m: rig.m(),
            frames: (0..frames)
                .map(|_| (0..rig.m()).map(|_| 0.5 + 0.3 * rng.normal()).collect())
                .collect(),
        };
        let mut pred = gt.clone();
        for row in &mut pred.frames {
            for w in row.iter_mut() {
                *w += 0.05 * rng.normal();
            }
        }
        let report = evaluate_weight_sequences(&rig, &pred, &gt).unwrap();
        assert_eq!(report.pve_trace.len(), frames);
        assert_eq!(report.pve_lmk_trace.len(), frames);
        assert_eq!(report.mse_trace.len(), frames);
        assert!(report.pve_mean > 0.0);
        assert!(report.pve_lmk_mean > 0.0);
        assert!(report.mse > 0.0);

        let same = evaluate_weight_sequences(&rig, &gt, &gt).unwrap();
        assert_eq!(same.pve_mean, 0.0);
        assert_eq!(same.pve_lmk_mean, 0.0);
        assert_eq!(same.mse, 0.0);
    }
}
