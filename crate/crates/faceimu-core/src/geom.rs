//! Rotation algebra: quaternions, rotation matrices, and 3-vectors.
//!
//! Conventions, fixed project-wide:
//! - Quaternions are scalar-first (w, x, y, z) and compose by the Hamilton
//!   product.
//! - Rotation matrices are row-major and denote the WORLD-TO-SENSOR
//!   transform: `R * v_world` expresses a world-frame vector in the sensor's
//!   local frame. This is the one convention under which the calibration
//!   chain cancels rigid head motion exactly (see `calib`).
//! - Quaternions produced from matrices are sign-canonicalized (w >= 0) so
//!   round trips are deterministic. Interpolation does NOT canonicalize its
//!   result; `slerp(a, b, 0)` must return `a` exactly.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use thiserror::Error;

/// Rejection threshold for "should already be unit/orthonormal" inputs.
/// Looser than the 1e-9 construction guarantee so that values round-tripped
/// through 32-bit wire formats still pass.
pub const INPUT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("quaternion norm {norm} is not unit (tolerance {tol})")]
    NonUnitQuaternion { norm: f64, tol: f64 },
    #[error("matrix is not a proper rotation (orthonormality error {ortho_err}, det {det})")]
    NotARotation { ortho_err: f64, det: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Caller guarantees a nonzero norm.
    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl core::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl core::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl core::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl core::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Unit quaternion, scalar first, Hamilton product convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Axis is normalized internally; caller guarantees it is nonzero.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let axis = axis.normalized();
        let (s, c) = (angle * 0.5).sin_cos();
        Self::new(c, axis.x * s, axis.y * s, axis.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Caller guarantees a nonzero norm. Result is unit within 1e-9.
    pub fn normalized(self) -> Quaternion {
        let inv = 1.0 / self.norm();
        Quaternion::new(self.w * inv, self.x * inv, self.y * inv, self.z * inv)
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Hamilton product. Norms multiply: |a*b| = |a|*|b|.
    pub fn multiply(self, o: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Flip sign so the scalar part is non-negative. A quaternion and its
    /// negation encode the same rotation; this picks one representative.
    /// When w is exactly zero the first nonzero vector component is made
    /// positive, so the choice is still deterministic.
    pub fn canonicalized(self) -> Quaternion {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Quaternion::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    /// Rotate a vector: q (0,v) q*. For world-to-sensor q this expresses a
    /// world vector in sensor coordinates, matching `to_matrix(q) * v`.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let qv = Vec3::new(self.x, self.y, self.z);
        let t = qv.cross(v) * 2.0;
        v + t * self.w + qv.cross(t)
    }

    /// Angular distance in radians, in [0, pi].
    pub fn angle_to(self, o: Quaternion) -> f64 {
        let d = self.dot(o).abs().min(1.0);
        2.0 * d.acos()
    }

    /// Spherical linear interpolation between unit quaternions.
    ///
    /// Contract: t=0 returns `a` exactly and t=1 returns `b` exactly.
    /// Antipodal pairs are resolved by flipping the sign of `b` for interior
    /// t, so the path is the short arc. Output is unit; not canonicalized.
    pub fn slerp(self, b: Quaternion, t: f64) -> Quaternion {
        if t <= 0.0 {
            return self;
        }
        if t >= 1.0 {
            return b;
        }
        let mut dot = self.dot(b);
        let mut end = b;
        if dot < 0.0 {
            dot = -dot;
            end = Quaternion::new(-b.w, -b.x, -b.y, -b.z);
        }
        if dot > 1.0 - 1e-9 {
            // Nearly parallel: linear blend avoids 0/0 in the sine weights.
            return Quaternion::new(
                self.w + (end.w - self.w) * t,
                self.x + (end.x - self.x) * t,
                self.y + (end.y - self.y) * t,
                self.z + (end.z - self.z) * t,
            )
            .normalized();
        }
        let theta = dot.min(1.0).acos();
        let sin_theta = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / sin_theta;
        let wb = (t * theta).sin() / sin_theta;
        Quaternion::new(
            self.w * wa + end.w * wb,
            self.x * wa + end.x * wb,
            self.y * wa + end.y * wb,
            self.z * wa + end.z * wb,
        )
        .normalized()
    }

    /// Convert to a rotation matrix. Inputs more than [`INPUT_TOL`] away from
    /// unit norm are rejected; accepted inputs are renormalized first so the
    /// result is orthonormal within 1e-9.
    pub fn to_matrix(self) -> Result<RotationMatrix, GeomError> {
        let norm = self.norm();
        if (norm - 1.0).abs() > INPUT_TOL {
            return Err(GeomError::NonUnitQuaternion { norm, tol: INPUT_TOL });
        }
        let q = self.normalized();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        Ok(RotationMatrix([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]))
    }
}

/// Proper rotation matrix, row-major, world-to-sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix =
        RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        RotationMatrix([
            [c0.x, c1.x, c2.x],
            [c0.y, c1.y, c2.y],
            [c0.z, c1.z, c2.z],
        ])
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        Quaternion::from_axis_angle(axis, angle)
            .to_matrix()
            .expect("axis-angle quaternion is unit by construction")
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::new(self.0[i][0], self.0[i][1], self.0[i][2])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3::new(self.0[0][j], self.0[1][j], self.0[2][j])
    }

    /// For proper rotations the transpose is the inverse.
    pub fn transpose(&self) -> RotationMatrix {
        let m = &self.0;
        RotationMatrix([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn multiply(&self, o: &RotationMatrix) -> RotationMatrix {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.0[i][0] * o.0[0][j] + self.0[i][1] * o.0[1][j] + self.0[i][2] * o.0[2][j];
            }
        }
        RotationMatrix(out)
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest absolute entry of R^T R - I.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.transpose().multiply(self);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((g.0[i][j] - target).abs());
            }
        }
        err
    }

    pub fn is_proper_rotation(&self, tol: f64) -> bool {
        self.orthonormality_error() <= tol && (self.det() - 1.0).abs() <= tol
    }

    pub fn frobenius_distance(&self, o: &RotationMatrix) -> f64 {
        let mut sum = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d = self.0[i][j] - o.0[i][j];
                sum += d * d;
            }
        }
        sum.sqrt()
    }

    /// Convert to a unit quaternion with w >= 0. Inputs farther than
    /// [`INPUT_TOL`] from a proper rotation are rejected.
    ///
    /// Branches on the largest of trace and diagonal entries so the divisor
    /// stays well away from zero for every rotation.
    pub fn to_quaternion(&self) -> Result<Quaternion, GeomError> {
        let ortho_err = self.orthonormality_error();
        let det = self.det();
        if ortho_err > INPUT_TOL || (det - 1.0).abs() > INPUT_TOL {
            return Err(GeomError::NotARotation { ortho_err, det });
        }
        let m = &self.0;
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        Ok(q.normalized().canonicalized())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_unit_quat(rng: &mut SeededRng) -> Quaternion {
        loop {
            let q = Quaternion::new(rng.normal(), rng.normal(), rng.normal(), rng.normal());
            if q.norm() > 1e-3 {
                return q.normalized();
            }
        }
    }

    fn assert_quat_close(a: Quaternion, b: Quaternion, tol: f64) {
        assert!(
            (a.w - b.w).abs() < tol
                && (a.x - b.x).abs() < tol
                && (a.y - b.y).abs() < tol
                && (a.z - b.z).abs() < tol,
            "{a:?} vs {b:?}"
        );
    }

    #[test]
    fn identity_times_q_is_q() {
        let q = Quaternion::from_axis_angle(Vec3::new(1.0, 2.0, -0.5), 0.7);
        assert_quat_close(Quaternion::IDENTITY.multiply(q), q, 1e-15);
        assert_quat_close(q.multiply(Quaternion::IDENTITY), q, 1e-15);
    }

    #[test]
    fn unit_q_times_conjugate_is_identity() {
        let q = Quaternion::from_axis_angle(Vec3::new(0.3, -1.0, 0.2), 1.9);
        assert_quat_close(q.multiply(q.conjugate()), Quaternion::IDENTITY, 1e-12);
    }

    #[test]
    fn two_quarter_turns_make_a_half_turn() {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let quarter = Quaternion::from_axis_angle(z, core::f64::consts::FRAC_PI_2);
        let half = Quaternion::from_axis_angle(z, core::f64::consts::PI);
        let composed = quarter.multiply(quarter);
        assert_quat_close(composed, half, 1e-12);
        // Cross-check through the matrix representation.
        let lhs = composed.to_matrix().unwrap();
        let rhs = quarter.to_matrix().unwrap().multiply(&quarter.to_matrix().unwrap());
        assert!(lhs.frobenius_distance(&rhs) < 1e-12);
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let m = Quaternion::IDENTITY.to_matrix().unwrap();
        assert!(m.frobenius_distance(&RotationMatrix::IDENTITY) < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z_matrix_entries() {
        let q = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), core::f64::consts::FRAC_PI_2);
        let m = q.to_matrix().unwrap();
        let expect = RotationMatrix([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(m.frobenius_distance(&expect) < 1e-12, "{m:?}");
    }

    #[test]
    fn matrix_round_trip_up_to_sign_1000_samples() {
        let mut rng = SeededRng::new(2024);
        for _ in 0..1000 {
            let q = random_unit_quat(&mut rng);
            let back = q.to_matrix().unwrap().to_quaternion().unwrap();
            let same = q.dot(back).abs();
            assert!((same - 1.0).abs() < 1e-9, "{q:?} -> {back:?}");
        }
    }

    #[test]
    fn matrix_to_quat_identity_and_half_turn() {
        let q = RotationMatrix::IDENTITY.to_quaternion().unwrap();
        assert_quat_close(q, Quaternion::IDENTITY, 1e-12);

        let half_x = RotationMatrix([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]);
        let q = half_x.to_quaternion().unwrap();
        assert_quat_close(q, Quaternion::new(0.0, 1.0, 0.0, 0.0), 1e-12);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let q = Quaternion::new(2.0, 0.0, 0.0, 0.0);
        assert!(matches!(q.to_matrix(), Err(GeomError::NonUnitQuaternion { .. })));
    }

    #[test]
    fn non_orthonormal_matrix_rejected() {
        let m = RotationMatrix([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(m.to_quaternion(), Err(GeomError::NotARotation { .. })));
        // Proper orthonormality but det = -1 (a reflection) is also rejected.
        let refl = RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
        assert!(matches!(refl.to_quaternion(), Err(GeomError::NotARotation { .. })));
    }

    #[test]
    fn slerp_endpoints_exact() {
        let a = Quaternion::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.4);
        let b = Quaternion::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 1.1);
        assert_eq!(a.slerp(b, 0.0), a);
        assert_eq!(a.slerp(b, 1.0), b);
    }

    #[test]
    fn slerp_midpoint_is_half_angle() {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let b = Quaternion::from_axis_angle(z, core::f64::consts::FRAC_PI_2);
        let mid = Quaternion::IDENTITY.slerp(b, 0.5);
        let expect = Quaternion::from_axis_angle(z, core::f64::consts::FRAC_PI_4);
        assert_quat_close(mid, expect, 1e-12);
    }

    #[test]
    fn slerp_takes_short_arc_for_antipodal_pair() {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let a = Quaternion::from_axis_angle(z, 0.2);
        let b = Quaternion::from_axis_angle(z, 0.8);
        let flipped = Quaternion::new(-b.w, -b.x, -b.y, -b.z);
        let mid = a.slerp(flipped, 0.5);
        let expect = Quaternion::from_axis_angle(z, 0.5);
        assert!(mid.dot(expect).abs() > 1.0 - 1e-12);
    }

    #[test]
    fn rotate_matches_matrix_apply() {
        let mut rng = SeededRng::new(5);
        for _ in 0..200 {
            let q = random_unit_quat(&mut rng);
            let v = Vec3::new(rng.normal(), rng.normal(), rng.normal());
            let by_quat = q.rotate(v);
            let by_mat = q.to_matrix().unwrap().apply(v);
            assert_abs_diff_eq!(by_quat.x, by_mat.x, epsilon = 1e-10);
            assert_abs_diff_eq!(by_quat.y, by_mat.y, epsilon = 1e-10);
            assert_abs_diff_eq!(by_quat.z, by_mat.z, epsilon = 1e-10);
        }
    }

    #[test]
    fn angle_to_reports_rotation_between() {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let a = Quaternion::from_axis_angle(z, 0.3);
        let b = Quaternion::from_axis_angle(z, 1.0);
        assert_abs_diff_eq!(a.angle_to(b), 0.7, epsilon = 1e-12);
        // Sign flip of one operand must not change the reported angle.
        let nb = Quaternion::new(-b.w, -b.x, -b.y, -b.z);
        assert_abs_diff_eq!(a.angle_to(nb), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn canonicalized_half_turn_tiebreak() {
        let q = Quaternion::new(0.0, -1.0, 0.0, 0.0);
        assert_eq!(q.canonicalized(), Quaternion::new(0.0, 1.0, 0.0, 0.0));
    }

    fn arb_unit_quat() -> impl Strategy<Value = Quaternion> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
        )
            .prop_filter_map("norm too small", |(w, x, y, z)| {
                let q = Quaternion::new(w, x, y, z);
                if q.norm() > 0.1 {
                    Some(q.normalized())
                } else {
                    None
                }
            })
    }

    proptest! {
        #[test]
        fn norm_is_multiplicative((aw, ax, ay, az, bw, bx, by, bz) in (
            -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0,
            -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0,
        )) {
            let a = Quaternion::new(aw, ax, ay, az);
            let b = Quaternion::new(bw, bx, by, bz);
            let prod = a.multiply(b).norm();
            prop_assert!((prod - a.norm() * b.norm()).abs() < 1e-9);
        }

        #[test]
        fn matrix_of_unit_quat_is_proper(q in arb_unit_quat()) {
            let m = q.to_matrix().unwrap();
            prop_assert!((m.det() - 1.0).abs() < 1e-9);
            prop_assert!(m.orthonormality_error() < 1e-9);
        }

        #[test]
        fn product_maps_to_matrix_product(a in arb_unit_quat(), b in arb_unit_quat()) {
            let lhs = a.multiply(b).to_matrix().unwrap();
            let rhs = a.to_matrix().unwrap().multiply(&b.to_matrix().unwrap());
            prop_assert!(lhs.frobenius_distance(&rhs) < 1e-9);
        }

        #[test]
        fn matrix_round_trip_up_to_sign(q in arb_unit_quat()) {
            let back = q.to_matrix().unwrap().to_quaternion().unwrap();
            prop_assert!((q.dot(back).abs() - 1.0).abs() < 1e-9);
        }
    }
}
