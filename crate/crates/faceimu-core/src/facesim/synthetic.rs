//! Built-in synthetic face rig: a procedurally generated half-ellipsoid
//! "face" with localized bump deltas and sensor anchors grouped into the
//! four muscle zones used for placement studies (frontalis, orbicularis,
//! zygomaticus, buccinator/mentalis).
//!
//! Geometry: the front half of an ellipsoid with semi-axes 70 mm (x, across
//! the face), 95 mm (y, up), 55 mm (z, out of the face). 20 latitude rings
//! of 24 columns plus two poles: 482 vertices. Columns run left (-x) to
//! right (+x); ring 1 is near the crown, ring 20 near the chin.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::{Anchor, BlendshapeRig};
use crate::geom::{RotationMatrix, Vec3};
use crate::rng::SeededRng;

pub const RINGS: usize = 20;
pub const COLS: usize = 24;
pub const VERTEX_COUNT: usize = RINGS * COLS + 2;

const SEMI_X: f64 = 70.0;
const SEMI_Y: f64 = 95.0;
const SEMI_Z: f64 = 55.0;

/// Sensor id of the chin-center anchor that receives the synchronization tap.
pub const MENTALIS_SENSOR: usize = 8;
pub const FRONTALIS_SENSORS: [usize; 2] = [1, 2];
pub const ORBICULARIS_SENSORS: [usize; 2] = [3, 4];
pub const ZYGOMATICUS_SENSORS: [usize; 3] = [5, 6, 7];
pub const BUCCINATOR_MENTALIS_SENSORS: [usize; 4] = [8, 9, 10, 11];

/// Blendshape channel indices of [`default_rig`].
pub const BROW_RAISE_LEFT: usize = 0;
pub const BROW_RAISE_RIGHT: usize = 1;
pub const EYE_SQUEEZE_LEFT: usize = 2;
pub const EYE_SQUEEZE_RIGHT: usize = 3;
pub const SMILE_LEFT: usize = 4;
pub const SMILE_RIGHT: usize = 5;
pub const JAW_OPEN: usize = 6;
pub const PUCKER: usize = 7;

pub fn delta_names() -> [&'static str; 8] {
    [
        "brow_raise_left",
        "brow_raise_right",
        "eye_squeeze_left",
        "eye_squeeze_right",
        "smile_left",
        "smile_right",
        "jaw_open",
        "pucker",
    ]
}

pub fn zone_name(sensor_id: usize) -> &'static str {
    match sensor_id {
        0 => "auxiliary",
        1 | 2 => "frontalis",
        3 | 4 => "orbicularis",
        5..=7 => "zygomaticus",
        8..=11 => "buccinator/mentalis",
        _ => "unknown",
    }
}

/// Vertex index for (ring, column); ring in 1..=RINGS, column in 0..COLS.
pub fn grid_index(ring: usize, col: usize) -> usize {
    debug_assert!((1..=RINGS).contains(&ring) && col < COLS);
    1 + (ring - 1) * COLS + col
}

fn vertex_position(ring: usize, col: usize) -> Vec3 {
    let u = ring as f64 * core::f64::consts::PI / (RINGS + 1) as f64;
    let phi = -core::f64::consts::FRAC_PI_2
        + (col as f64 + 0.5) * core::f64::consts::PI / COLS as f64;
    Vec3::new(
        SEMI_X * u.sin() * phi.sin(),
        SEMI_Y * u.cos(),
        SEMI_Z * u.sin() * phi.cos(),
    )
}

/// Outward surface normal of the ellipsoid at a point on it.
fn surface_normal(p: Vec3) -> Vec3 {
    Vec3::new(
        p.x / (SEMI_X * SEMI_X),
        p.y / (SEMI_Y * SEMI_Y),
        p.z / (SEMI_Z * SEMI_Z),
    )
    .normalized()
}

/// Gaussian bump along the surface normal: amplitude `amp` mm at the center
/// vertex, falling off with distance at scale `sigma` mm.
fn bump_delta(vertices: &[Vec3], center: usize, sigma: f64, amp: f64) -> Vec<Vec3> {
    let c = vertices[center];
    vertices
        .iter()
        .map(|&p| {
            let d2 = (p - c).norm_squared();
            let w = (-d2 / (2.0 * sigma * sigma)).exp();
            if w < 1e-8 {
                Vec3::ZERO
            } else {
                surface_normal(p) * (amp * w)
            }
        })
        .collect()
}

/// The default 482-vertex rig with 8 blendshapes and 11 sensor anchors.
pub fn default_rig() -> BlendshapeRig {
    let mut neutral = Vec::with_capacity(VERTEX_COUNT);
    neutral.push(Vec3::new(0.0, SEMI_Y, 0.0)); // crown pole
    for ring in 1..=RINGS {
        for col in 0..COLS {
            neutral.push(vertex_position(ring, col));
        }
    }
    neutral.push(Vec3::new(0.0, -SEMI_Y, 0.0)); // chin pole

    // (center, sigma mm, amplitude mm) per channel, ordered as the channel
    // constants above.
    let spec: [(usize, f64, f64); 8] = [
        (grid_index(3, 8), 14.0, 5.0),   // brow raise left
        (grid_index(3, 15), 14.0, 5.0),  // brow raise right
        (grid_index(7, 7), 12.0, 4.0),   // eye squeeze left
        (grid_index(7, 16), 12.0, 4.0),  // eye squeeze right
        (grid_index(12, 5), 14.0, 6.0),  // smile left
        (grid_index(12, 18), 14.0, 6.0), // smile right
        (grid_index(17, 11), 18.0, 8.0), // jaw open
        (grid_index(14, 12), 10.0, 5.0), // pucker
    ];
    let deltas = spec
        .iter()
        .map(|&(center, sigma, amp)| bump_delta(&neutral, center, sigma, amp))
        .collect();

    // Anchors by zone; supports are the grid neighbors right and below,
    // which are never collinear with the anchor on the curved surface.
    let anchor_cells: [(usize, usize, usize); 11] = [
        (1, 3, 9),   // frontalis left
        (2, 3, 14),  // frontalis right
        (3, 7, 6),   // orbicularis left
        (4, 7, 17),  // orbicularis right
        (5, 11, 5),  // zygomaticus left
        (6, 11, 18), // zygomaticus right
        (7, 12, 6),  // zygomaticus left lower
        (8, 17, 12), // mentalis (tap sensor)
        (9, 14, 7),  // buccinator left
        (10, 14, 16), // buccinator right
        (11, 16, 10), // lower lip
    ];
    let anchors = anchor_cells
        .iter()
        .map(|&(sensor_id, ring, col)| Anchor {
            sensor_id,
            vertex: grid_index(ring, col),
            supports: [grid_index(ring, col + 1), grid_index(ring + 1, col)],
        })
        .collect();

    let mut landmarks = Vec::new();
    // Brow line, eye line, nose bridge, mouth ring, jaw line.
    for col in [6, 9, 11, 14, 17] {
        landmarks.push(grid_index(3, col));
    }
    for col in [5, 7, 9, 14, 16, 18] {
        landmarks.push(grid_index(7, col));
    }
    for col in [10, 11, 12, 13] {
        landmarks.push(grid_index(10, col));
    }
    for col in 8..=15 {
        landmarks.push(grid_index(14, col));
    }
    for col in [9, 11, 12, 14] {
        landmarks.push(grid_index(15, col));
    }
    for col in [8, 10, 12, 14] {
        landmarks.push(grid_index(17, col));
    }
    for col in [9, 11, 13] {
        landmarks.push(grid_index(18, col));
    }

    BlendshapeRig { neutral, deltas, landmarks, anchors }
}

/// Smooth random head-rotation track: three low-frequency sinusoidal Euler
/// angles, each bounded by `max_angle` radians.
pub fn smooth_head_motion(frames: usize, seed: u64, max_angle: f64) -> Vec<RotationMatrix> {
    let mut rng = SeededRng::new(seed);
    let fps = super::DEFAULT_FPS;
    let mut params = [(0.0, 0.0, 0.0); 3];
    for p in params.iter_mut() {
        *p = (
            rng.range(0.2, 1.0) * max_angle,
            rng.range(0.1, 0.5), // Hz
            rng.range(0.0, core::f64::consts::TAU),
        );
    }
    let axes = [
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
    ];
    (0..frames)
        .map(|j| {
            let t = j as f64 / fps;
            let mut g = RotationMatrix::IDENTITY;
            for (axis, &(amp, hz, phase)) in axes.iter().zip(&params) {
                let angle = amp * (core::f64::consts::TAU * hz * t + phase).sin();
                g = g.multiply(&RotationMatrix::from_axis_angle(*axis, angle));
            }
            g
        })
        .collect()
}
