//! Rotation and rigid-transform primitives shared by every other module.
//!
//! Vectors and matrices are `nalgebra` types; the rotation newtypes carry the
//! SO(3) invariants and the axis-angle conventions used throughout the crate.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4};
use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Orthonormality / determinant tolerance for [`Rot3`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn ensure_finite(v: &Vec3, what: &str) -> Result<(), GeometryError> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::InvalidArgument(format!("{what} has non-finite components")))
    }
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot3(Mat3);

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Mat3::identity())
    }

    /// Validates orthonormality and `det = +1` within [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: Mat3) -> Result<Self, GeometryError> {
        if !m.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidArgument("rotation has non-finite entries".into()));
        }
        let ortho = (m.transpose() * m - Mat3::identity()).abs().max();
        if ortho > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidArgument(format!(
                "matrix is not orthonormal (max |R^T R - I| = {ortho:.3e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidArgument(format!("rotation determinant is {det}")));
        }
        Ok(Rot3(m))
    }

    /// Wraps `m` without validation. Callers guarantee it is a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rot3(m)
    }

    /// Closest rotation in Frobenius norm (SVD projection onto SO(3)).
    pub fn nearest(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rot3(u * d * v_t)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rot3(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn from_axis_angle(a: &AxisAngle) -> Self {
        exp_so3(&a.0)
    }

    pub fn to_axis_angle(&self) -> AxisAngle {
        AxisAngle(log_so3(&self.0))
    }
}

impl Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rot3 {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Rotation vector: unit axis scaled by the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxisAngle(pub Vec3);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vec3::new(x, y, z))
    }

    pub fn zero() -> Self {
        AxisAngle(Vec3::zeros())
    }

    pub fn vector(&self) -> &Vec3 {
        &self.0
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Maps to the equivalent rotation vector with magnitude in `[0, pi]`.
    /// At exactly `pi` the axis is flipped so its first nonzero component is
    /// positive.
    pub fn canonical(&self) -> AxisAngle {
        let theta = self.0.norm();
        if theta == 0.0 || !theta.is_finite() {
            return *self;
        }
        let axis = self.0 / theta;
        let mut wrapped = theta.rem_euclid(2.0 * PI);
        let mut axis = axis;
        if wrapped > PI {
            wrapped = 2.0 * PI - wrapped;
            axis = -axis;
        }
        if (PI - wrapped).abs() < 1e-12 {
            wrapped = PI;
            axis = positive_first_component(axis);
        }
        AxisAngle(axis * wrapped)
    }
}

fn positive_first_component(axis: Vec3) -> Vec3 {
    for c in axis.iter() {
        if c.abs() > 1e-12 {
            return if *c < 0.0 { -axis } else { axis };
        }
    }
    axis
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rot3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Rot3, translation: Vec3) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn identity() -> Self {
        RigidTransform { rotation: Rot3::identity(), translation: Vec3::zeros() }
    }

    pub fn translation(t: Vec3) -> Self {
        RigidTransform { rotation: Rot3::identity(), translation: t }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

fn exp_so3(w: &Vec3) -> Rot3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rot3(Mat3::identity() + k * a + k * k * b)
}

fn log_so3(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = vee(r); // sin(theta) * axis
    let sin = s.norm();
    let theta = sin.atan2(cos);
    if theta < 1e-6 {
        return s * (1.0 + theta * theta / 6.0);
    }
    if theta < PI - 1e-2 {
        return s * (theta / sin);
    }
    // Near pi: recover the axis from the symmetric part using the column with
    // the largest diagonal entry, then fix its sign with the antisymmetric part.
    let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * cos;
    let one_minus_cos = 1.0 - cos;
    let (i, _) = (0..3)
        .map(|i| (i, sym[(i, i)]))
        .fold((0, f64::MIN), |best, c| if c.1 > best.1 { c } else { best });
    let col = sym.column(i).into_owned();
    let mut axis = col / (col[i] * one_minus_cos).max(0.0).sqrt();
    axis /= axis.norm();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    if sin < 1e-12 {
        axis = positive_first_component(axis);
    }
    axis * theta
}

pub fn axis_angle_to_rot(a: &AxisAngle) -> Result<Rot3, GeometryError> {
    ensure_finite(&a.0, "axis-angle")?;
    Ok(exp_so3(&a.0))
}

pub fn rot_to_axis_angle(r: &Rot3) -> Result<AxisAngle, GeometryError> {
    let checked = Rot3::from_matrix(r.0)?;
    Ok(AxisAngle(log_so3(&checked.0)).canonical())
}

/// Angle of the relative rotation `r1^T r2`, in `[0, pi]`.
///
/// Evaluated as `atan2(|vee(D)|, (tr D - 1)/2)` which agrees with the clamped
/// arccos form but keeps full precision near 0 and pi.
pub fn geodesic_angle(r1: &Rot3, r2: &Rot3) -> Result<f64, GeometryError> {
    let r1 = Rot3::from_matrix(r1.0)?;
    let r2 = Rot3::from_matrix(r2.0)?;
    Ok(relative_angle(&r1.0, &r2.0))
}

/// Unchecked kernel behind [`geodesic_angle`].
pub(crate) fn relative_angle(r1: &Mat3, r2: &Mat3) -> f64 {
    let d = r1.transpose() * r2;
    let cos = ((d.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    vee(&d).norm().atan2(cos)
}

pub fn transform_point(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.rotation.rotate(p) + t.translation
}

pub fn inverse_transform(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform { rotation: rt, translation: -(rt.rotate(&t.translation)) }
}

/// Partial derivatives `dR/dw_i` of the exponential map at `w`.
pub fn exp_derivatives(w: &Vec3) -> [Mat3; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2 < 1e-10 {
        // First-order expansion around the identity.
        return basis.map(|e| skew(&e) + (skew(w) * skew(&e) + skew(&e) * skew(w)) * 0.5);
    }
    let r = exp_so3(w).0;
    let i_minus_r = Mat3::identity() - r;
    let kw = skew(w);
    basis.map(|e| {
        let idx = if e.x != 0.0 { 0 } else if e.y != 0.0 { 1 } else { 2 };
        let v = w.cross(&(i_minus_r * e));
        ((kw * w[idx] + skew(&v)) / theta2) * r
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_axis_angle(rng: &mut impl Rng, max_angle: f64) -> AxisAngle {
        loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return AxisAngle(v / n * rng.gen_range(1e-3..max_angle));
            }
        }
    }

    #[test]
    fn zero_vector_is_identity() {
        let r = axis_angle_to_rot(&AxisAngle::zero()).unwrap();
        assert_eq!(*r.matrix(), Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle_to_rot(&AxisAngle::new(0.0, 0.0, PI / 2.0)).unwrap();
        let p = r.rotate(&Vec3::x());
        assert_relative_eq!(p, Vec3::y(), epsilon = 1e-15);
    }

    #[test]
    fn non_finite_axis_angle_rejected() {
        assert!(axis_angle_to_rot(&AxisAngle::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn identity_log_is_zero() {
        let a = rot_to_axis_angle(&Rot3::identity()).unwrap();
        assert_eq!(a.0, Vec3::zeros());
    }

    #[test]
    fn half_turn_about_x() {
        let r = Rot3::from_matrix(Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))).unwrap();
        let a = rot_to_axis_angle(&r).unwrap();
        assert_relative_eq!(a.0, Vec3::new(PI, 0.0, 0.0), epsilon = 1e-12);
        let r = Rot3::from_matrix(Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0))).unwrap();
        assert_relative_eq!(rot_to_axis_angle(&r).unwrap().0, Vec3::new(0.0, 0.0, PI), epsilon = 1e-12);
    }

    #[test]
    fn non_orthonormal_rejected() {
        let m = Mat3::identity() * 1.01;
        assert!(rot_to_axis_angle(&Rot3::from_matrix_unchecked(m)).is_err());
        let reflection = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Rot3::from_matrix(reflection).is_err());
    }

    #[test]
    fn axis_angle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = random_axis_angle(&mut rng, PI - 1e-3);
            let back = rot_to_axis_angle(&axis_angle_to_rot(&a).unwrap()).unwrap();
            assert!((back.0 - a.canonical().0).norm() < 1e-9, "{a:?} -> {back:?}");
        }
    }

    #[test]
    fn rotation_round_trip_including_near_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..1000 {
            let max = if i % 2 == 0 { PI } else { PI - 1e-3 };
            let r = axis_angle_to_rot(&random_axis_angle(&mut rng, max)).unwrap();
            let back = axis_angle_to_rot(&rot_to_axis_angle(&r).unwrap()).unwrap();
            assert!((back.matrix() - r.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn canonical_wraps_large_angles() {
        let a = AxisAngle::new(0.0, 0.0, 1.5 * PI).canonical();
        assert_relative_eq!(a.0, Vec3::new(0.0, 0.0, -0.5 * PI), epsilon = 1e-12);
        let a = AxisAngle::new(-PI, 0.0, 0.0).canonical();
        assert_relative_eq!(a.0, Vec3::new(PI, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn geodesic_basic_cases() {
        let i = Rot3::identity();
        assert_eq!(geodesic_angle(&i, &i).unwrap(), 0.0);
        let flip = axis_angle_to_rot(&AxisAngle::new(PI, 0.0, 0.0)).unwrap();
        assert_relative_eq!(geodesic_angle(&i, &flip).unwrap(), PI, epsilon = 1e-12);
    }

    #[test]
    fn geodesic_matches_log_and_is_bi_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let r1 = axis_angle_to_rot(&random_axis_angle(&mut rng, PI)).unwrap();
            let r2 = axis_angle_to_rot(&random_axis_angle(&mut rng, PI)).unwrap();
            let q = axis_angle_to_rot(&random_axis_angle(&mut rng, PI)).unwrap();
            let d = geodesic_angle(&r1, &r2).unwrap();
            let via_log = rot_to_axis_angle(&(r1.transpose() * r2)).unwrap().angle();
            assert!((d - via_log).abs() < 1e-9);
            assert!((d - geodesic_angle(&r2, &r1).unwrap()).abs() < 1e-12);
            assert!((d - geodesic_angle(&(q * r1), &(q * r2)).unwrap()).abs() < 1e-9);
            assert!((0.0..=PI).contains(&d));
        }
    }

    #[test]
    fn transform_basics() {
        let p = Vec3::new(0.3, -2.0, 7.0);
        assert_eq!(transform_point(&RigidTransform::identity(), &p), p);
        let t = RigidTransform::translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(transform_point(&t, &Vec3::zeros()), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(inverse_transform(&t).translation, Vec3::new(-1.0, -2.0, -3.0));
        assert_eq!(inverse_transform(&RigidTransform::identity()), RigidTransform::identity());
    }

    #[test]
    fn inverse_round_trip_and_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let random_tf = |rng: &mut ChaCha8Rng| {
            RigidTransform::new(
                axis_angle_to_rot(&random_axis_angle(rng, PI)).unwrap(),
                Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
            )
        };
        for _ in 0..200 {
            let t = random_tf(&mut rng);
            let p = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let back = transform_point(&inverse_transform(&t), &transform_point(&t, &p));
            assert!((back - p).norm() < 1e-12);

            let chain: Vec<_> = (0..5).map(|_| random_tf(&mut rng)).collect();
            let left = chain.iter().skip(1).fold(chain[0], |acc, t| acc.compose(t));
            let right = chain.iter().rev().skip(1).fold(chain[4], |acc, t| t.compose(&acc));
            let (a, b) = (transform_point(&left, &p), transform_point(&right, &p));
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn exp_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for k in 0..50 {
            let w = if k == 0 { Vec3::zeros() } else { random_axis_angle(&mut rng, 3.0).0 };
            let d = exp_derivatives(&w);
            for i in 0..3 {
                let mut e = Vec3::zeros();
                e[i] = h;
                let fd = (exp_so3(&(w + e)).0 - exp_so3(&(w - e)).0) / (2.0 * h);
                assert!((fd - d[i]).norm() < 1e-8, "component {i} at {w:?}");
            }
        }
    }

    #[test]
    fn nearest_rotation_projects() {
        let m = Mat3::new(1.01, 0.02, 0.0, -0.01, 0.98, 0.03, 0.0, -0.02, 1.0);
        let r = Rot3::nearest(&m);
        assert!(Rot3::from_matrix(*r.matrix()).is_ok());
    }
}
