//! Pinhole camera model, PnP extrinsic calibration, the MoCap → camera →
//! radar transform chain and the RGB back-projection geometry.

use nalgebra::{DMatrix, Matrix3x4, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{inverse_transform, skew, transform_point, Mat3, Rot3, RigidTransform, Vec3};

/// Minimum number of 2D-3D correspondences accepted by [`solve_pnp`].
pub const MIN_PNP_POINTS: usize = 6;
pub const LM_MAX_ITERATIONS: usize = 100;
pub const LM_GRADIENT_TOLERANCE: f64 = 1e-10;
const LM_STEP_TOLERANCE: f64 = 1e-12;
/// Relative singular-value floor for the non-coplanarity test.
pub const COPLANARITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("refinement did not converge after {iterations} iterations (mean squared residual {residual:.6e} px^2)")]
    NonConvergence { iterations: usize, residual: f64 },
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, CalibError> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.width, self.height];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(CalibError::InvalidArgument("intrinsics must be finite".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CalibError::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width && self.cy > 0.0 && self.cy < self.height) {
            return Err(CalibError::InvalidArgument("principal point must lie inside the image".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, pixel: (f64, f64)) -> bool {
        pixel.0 >= 0.0 && pixel.0 <= self.width && pixel.1 >= 0.0 && pixel.1 <= self.height
    }
}

/// A MoCap-frame point and its annotated pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub world: Vec3,
    pub pixel: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub extrinsics: RigidTransform,
    pub mean_reprojection_error: f64,
    pub per_point_residuals: Vec<f64>,
    pub iterations: usize,
}

fn project_camera(k: &CameraIntrinsics, pc: &Vec3) -> Result<(f64, f64), CalibError> {
    if !(pc.z > 0.0) {
        return Err(CalibError::BehindCamera { depth: pc.z });
    }
    Ok((k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
}

/// Projects a world point through `ext` (camera ← world) and `k`.
pub fn project(k: &CameraIntrinsics, ext: &RigidTransform, p_world: &Vec3) -> Result<(f64, f64), CalibError> {
    project_camera(k, &transform_point(ext, p_world))
}

/// Singular values of the centered point matrix, descending.
fn spread(points: &[Vec3]) -> [f64; 3] {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let mut s: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    [s[0], s[1], s[2]]
}

/// Similarity `T` with `T p` centered at the origin and mean distance `target`.
fn normalizer<const D: usize>(points: &[nalgebra::SVector<f64, D>], target: f64) -> (f64, nalgebra::SVector<f64, D>) {
    let n = points.len() as f64;
    let mean = points.iter().sum::<nalgebra::SVector<f64, D>>() / n;
    let mean_dist = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let scale = if mean_dist > 0.0 { target / mean_dist } else { 1.0 };
    (scale, mean)
}

/// Direct linear transform on intrinsics-normalized image coordinates.
fn dlt_pose(world: &[Vec3], normalized: &[nalgebra::Vector2<f64>]) -> Result<RigidTransform, CalibError> {
    let (s3, m3) = normalizer(world, 3f64.sqrt());
    let (s2, m2) = normalizer(normalized, 2f64.sqrt());
    let n = world.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (x, u)) in world.iter().zip(normalized).enumerate() {
        let xw = (x - m3) * s3;
        let uv = (u - m2) * s2;
        let h = [xw.x, xw.y, xw.z, 1.0];
        for c in 0..4 {
            a[(2 * i, c)] = h[c];
            a[(2 * i, 8 + c)] = -uv.x * h[c];
            a[(2 * i + 1, 4 + c)] = h[c];
            a[(2 * i + 1, 8 + c)] = -uv.y * h[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| CalibError::DegenerateGeometry("DLT decomposition failed".into()))?;
    let (min_row, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    let p_norm = Matrix3x4::from_fn(|r, c| v_t[(min_row, 4 * r + c)]);

    // Undo both normalizations: P = T2^-1 * P_norm * T3.
    let t2_inv = Mat3::new(1.0 / s2, 0.0, m2.x, 0.0, 1.0 / s2, m2.y, 0.0, 0.0, 1.0);
    let mut t3 = nalgebra::Matrix4::<f64>::identity() * s3;
    t3[(3, 3)] = 1.0;
    t3.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-m3 * s3));
    let mut p = t2_inv * p_norm * t3;

    let mut m = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let svd = m.svd(true, true);
    let scale = svd.singular_values.mean();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(CalibError::DegenerateGeometry("DLT produced a singular camera matrix".into()));
    }
    let rotation = Rot3::nearest(&m);
    let translation = p.column(3).into_owned() / scale;
    Ok(RigidTransform::new(rotation, translation))
}

struct Residuals {
    values: Vec<f64>,
    cost: f64,
}

fn residuals(k: &CameraIntrinsics, pose: &RigidTransform, corr: &[Correspondence]) -> Option<Residuals> {
    let mut values = Vec::with_capacity(2 * corr.len());
    for c in corr {
        let (u, v) = project(k, pose, &c.world).ok()?;
        values.push(u - c.pixel.0);
        values.push(v - c.pixel.1);
    }
    let cost = values.iter().map(|r| r * r).sum::<f64>() / corr.len() as f64;
    Some(Residuals { values, cost })
}

/// Normal equations of the mean squared reprojection error under the left
/// perturbation `R <- exp(d) R`, `t <- t + dt`.
fn normal_equations(
    k: &CameraIntrinsics,
    pose: &RigidTransform,
    corr: &[Correspondence],
    r: &[f64],
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let n = corr.len() as f64;
    for (i, c) in corr.iter().enumerate() {
        let rotated = pose.rotation.rotate(&c.world);
        let pc = rotated + pose.translation;
        let iz = 1.0 / pc.z;
        let dproj = nalgebra::Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * pc.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * pc.y * iz * iz,
        );
        let mut dpc = nalgebra::Matrix3x6::zeros();
        dpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rotated)));
        dpc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
        let j = dproj * dpc;
        let ri = nalgebra::Vector2::new(r[2 * i], r[2 * i + 1]);
        h += j.transpose() * j;
        g += j.transpose() * ri;
    }
    (h * (2.0 / n), g * (2.0 / n))
}

fn apply_step(pose: &RigidTransform, step: &Vector6<f64>) -> RigidTransform {
    let dr = crate::geometry::axis_angle_to_rot(&crate::geometry::AxisAngle(Vec3::new(step[0], step[1], step[2])))
        .expect("finite step");
    RigidTransform::new(dr * pose.rotation, pose.translation + Vec3::new(step[3], step[4], step[5]))
}

fn check_non_coplanar(points: &[Vec3]) -> Result<(), CalibError> {
    let s = spread(points);
    if !(s[2] > COPLANARITY_TOLERANCE * s[0]) {
        return Err(CalibError::DegenerateGeometry(format!(
            "points are coplanar (singular values {:.3e}, {:.3e}, {:.3e})",
            s[0], s[1], s[2]
        )));
    }
    Ok(())
}

/// Estimates camera ← world extrinsics from 2D-3D correspondences with a
/// normalized DLT initialization and Levenberg-Marquardt refinement.
pub fn solve_pnp(k: &CameraIntrinsics, corr: &[Correspondence]) -> Result<CalibrationResult, CalibError> {
    k.validate()?;
    if corr.len() < MIN_PNP_POINTS {
        return Err(CalibError::InsufficientData { needed: MIN_PNP_POINTS, got: corr.len() });
    }
    for c in corr {
        if !c.world.iter().all(|v| v.is_finite()) || !c.pixel.0.is_finite() || !c.pixel.1.is_finite() {
            return Err(CalibError::InvalidArgument("correspondence has non-finite values".into()));
        }
        if !k.contains(c.pixel) {
            return Err(CalibError::InvalidArgument(format!("pixel {:?} outside the image", c.pixel)));
        }
    }
    let world: Vec<Vec3> = corr.iter().map(|c| c.world).collect();
    check_non_coplanar(&world)?;
    let normalized: Vec<_> = corr
        .iter()
        .map(|c| nalgebra::Vector2::new((c.pixel.0 - k.cx) / k.fx, (c.pixel.1 - k.cy) / k.fy))
        .collect();

    let mut pose = dlt_pose(&world, &normalized)?;
    let mut current = residuals(k, &pose, corr).ok_or_else(|| {
        CalibError::DegenerateGeometry("linear estimate places points behind the camera".into())
    })?;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < LM_MAX_ITERATIONS {
        iterations += 1;
        let (h, g) = normal_equations(k, &pose, corr, &current.values);
        if g.amax() <= LM_GRADIENT_TOLERANCE || current.cost == 0.0 {
            converged = true;
            break;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut damped = h;
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = apply_step(&pose, &step);
            match residuals(k, &candidate, corr) {
                Some(next) if next.cost <= current.cost => {
                    let scale = pose.translation.norm() + 1.0;
                    let tiny = step.norm() <= LM_STEP_TOLERANCE * scale;
                    pose = candidate;
                    current = next;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = true;
                    if tiny {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !improved {
            // No damping level reduces the cost: the estimate is a numerical minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(CalibError::NonConvergence { iterations, residual: current.cost });
    }
    let per_point_residuals: Vec<f64> =
        current.values.chunks_exact(2).map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt()).collect();
    let mean = per_point_residuals.iter().sum::<f64>() / per_point_residuals.len() as f64;
    Ok(CalibrationResult { extrinsics: pose, mean_reprojection_error: mean, per_point_residuals, iterations })
}

/// Least-squares rigid transform `dst ≈ R src + t` (Umeyama, no scale) for
/// 3D-3D correspondences such as radar-frame reflector positions.
pub fn solve_absolute_orientation(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform, CalibError> {
    if src.len() != dst.len() {
        return Err(CalibError::InvalidArgument("point lists differ in length".into()));
    }
    if src.len() < 3 {
        return Err(CalibError::InsufficientData { needed: 3, got: src.len() });
    }
    let s = spread(src);
    if !(s[1] > COPLANARITY_TOLERANCE * s[0]) {
        return Err(CalibError::DegenerateGeometry("source points are collinear".into()));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vec3>() / n;
    let md = dst.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for (a, b) in src.iter().zip(dst) {
        cov += (b - md) * (a - ms).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = Rot3::nearest(&(u * d * v_t));
    let translation = md - rotation.rotate(&ms);
    Ok(RigidTransform::new(rotation, translation))
}

/// Maps a MoCap-frame point into the radar frame through the camera frame.
pub fn chain_vicon_to_radar(cam_from_vicon: &RigidTransform, cam_from_radar: &RigidTransform, p_vicon: &Vec3) -> Vec3 {
    transform_point(&inverse_transform(cam_from_radar), &transform_point(cam_from_vicon, p_vicon))
}

/// Weak-perspective camera prediction relative to a square person crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspective {
    pub s_hat: f64,
    pub u_hat: f64,
    pub v_hat: f64,
    pub box_size: f64,
    pub box_center: (f64, f64),
}

impl WeakPerspective {
    /// Crop-pixel location `(x_pix, y_pix)` of the predicted root.
    pub fn pixel(&self) -> (f64, f64) {
        let half = self.box_size * self.s_hat * 0.5;
        (self.box_center.0 + half * self.u_hat, self.box_center.1 + half * self.v_hat)
    }
}

/// Camera-frame root position implied by a weak-perspective prediction.
/// Depth uses `fx`; the vertical row uses `fy`.
pub fn weak_perspective_backproject(k: &CameraIntrinsics, wp: &WeakPerspective) -> Result<Vec3, CalibError> {
    if !(wp.s_hat > 0.0) || !(wp.box_size > 0.0) || !wp.s_hat.is_finite() || !wp.box_size.is_finite() {
        return Err(CalibError::InvalidArgument("scale and box size must be positive".into()));
    }
    if !(-1.0..=1.0).contains(&wp.u_hat) || !(-1.0..=1.0).contains(&wp.v_hat) {
        return Err(CalibError::InvalidArgument("crop coordinates must lie in [-1, 1]".into()));
    }
    let b_s = wp.box_size * wp.s_hat;
    let (x_pix, y_pix) = wp.pixel();
    let z = 2.0 * k.fx / b_s;
    Ok(Vec3::new((x_pix - k.width / 2.0) * z / k.fx, (y_pix - k.height / 2.0) * z / k.fy, z))
}

/// Row-major per-pixel depth in meters; zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

/// Camera-frame points for every valid pixel of `img`, in row-major order.
pub fn depth_backproject(k: &CameraIntrinsics, img: &DepthImage) -> Vec<Vec3> {
    let mut out = Vec::new();
    for v in 0..img.height {
        for u in 0..img.width {
            let d = img.depth[v * img.width + u];
            if d > 0.0 && d.is_finite() {
                let (uf, vf) = (u as f64, v as f64);
                out.push(Vec3::new((uf - k.cx) * d / k.fx, (vf - k.cy) * d / k.fy, d));
            }
        }
    }
    out
}

/// Text formats used by the `calibrate` command.
pub mod io {
    use super::*;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct PointFile {
        #[serde(default)]
        pub points: Vec<PointRecord>,
    }

    /// A MoCap point paired with either a pixel (PnP) or a second-frame 3D
    /// position (absolute orientation).
    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct PointRecord {
        pub world: [f64; 3],
        pub pixel: Option<[f64; 2]>,
        pub target: Option<[f64; 3]>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
    pub struct ResultFile {
        pub rotation: [f64; 9],
        pub translation: [f64; 3],
        pub mean_reproj_px: Option<f64>,
        pub residuals_px: Vec<f64>,
    }

    impl ResultFile {
        pub fn from_transform(t: &RigidTransform, mean: Option<f64>, residuals: Vec<f64>) -> Self {
            let m = t.rotation.matrix();
            let mut rotation = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    rotation[3 * r + c] = m[(r, c)];
                }
            }
            ResultFile {
                rotation,
                translation: [t.translation.x, t.translation.y, t.translation.z],
                mean_reproj_px: mean,
                residuals_px: residuals,
            }
        }
    }
}
