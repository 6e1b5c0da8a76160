//! Body parameters, a simplified 22-joint capsule body, and the training
//! losses with analytic gradients.
//!
//! The body is a stand-in for the SMPL-X template: joints follow the SMPL-X
//! body-joint order, bones are rigid capsules, and shape acts as per-axis
//! scaling of the rest offsets.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{axis_angle_to_rot, exp_derivatives, rot_to_axis_angle, vee, AxisAngle, Mat3, Rot3, Vec3};

pub const NUM_JOINTS: usize = 22;
pub const NUM_BETAS: usize = 10;
/// Length of the flat parameter vector: alpha, beta, tau, theta, g.
pub const PARAM_LEN: usize = 3 + NUM_BETAS + 3 + 3 * NUM_JOINTS + 1;
pub const ALPHA_OFFSET: usize = 0;
pub const BETA_OFFSET: usize = 3;
pub const TAU_OFFSET: usize = 13;
pub const THETA_OFFSET: usize = 16;
pub const G_OFFSET: usize = 82;

pub const RECORD_MAGIC: &[u8; 4] = b"M4BP";
pub const RECORD_VERSION: u16 = 1;
pub const RECORD_HEADER_LEN: usize = 8;
pub const RECORD_LEN: usize = RECORD_HEADER_LEN + 4 * PARAM_LEN;

/// Clamp applied to the predicted gender probability inside the BCE term.
pub const BCE_EPSILON: f64 = 1e-7;
/// Gender probability at or above which the male template is used.
pub const MALE_THRESHOLD: f64 = 0.5;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("malformed parameter record: {0}")]
    Malformed(String),
}

/// SMPL-X-style parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyParams {
    pub alpha: AxisAngle,
    pub beta: [f64; NUM_BETAS],
    pub tau: Vec3,
    pub theta: [AxisAngle; NUM_JOINTS],
    pub g: f64,
}

impl Default for BodyParams {
    fn default() -> Self {
        BodyParams {
            alpha: AxisAngle::zero(),
            beta: [0.0; NUM_BETAS],
            tau: Vec3::zeros(),
            theta: [AxisAngle::zero(); NUM_JOINTS],
            g: 0.0,
        }
    }
}

impl BodyParams {
    pub fn validate(&self) -> Result<(), BodyError> {
        if !self.to_vector().iter().all(|v| v.is_finite()) {
            return Err(BodyError::InvalidParams("non-finite value".into()));
        }
        if !(0.0..=1.0).contains(&self.g) {
            return Err(BodyError::InvalidParams(format!("gender probability {} outside [0, 1]", self.g)));
        }
        Ok(())
    }

    pub fn to_vector(&self) -> [f64; PARAM_LEN] {
        let mut v = [0.0; PARAM_LEN];
        v[ALPHA_OFFSET..ALPHA_OFFSET + 3].copy_from_slice(self.alpha.vector().as_slice());
        v[BETA_OFFSET..BETA_OFFSET + NUM_BETAS].copy_from_slice(&self.beta);
        v[TAU_OFFSET..TAU_OFFSET + 3].copy_from_slice(self.tau.as_slice());
        for (j, t) in self.theta.iter().enumerate() {
            v[THETA_OFFSET + 3 * j..THETA_OFFSET + 3 * j + 3].copy_from_slice(t.vector().as_slice());
        }
        v[G_OFFSET] = self.g;
        v
    }

    pub fn from_vector(v: &[f64]) -> Result<Self, BodyError> {
        if v.len() != PARAM_LEN {
            return Err(BodyError::InvalidParams(format!("expected {PARAM_LEN} values, got {}", v.len())));
        }
        let v3 = |o: usize| Vec3::new(v[o], v[o + 1], v[o + 2]);
        let mut beta = [0.0; NUM_BETAS];
        beta.copy_from_slice(&v[BETA_OFFSET..BETA_OFFSET + NUM_BETAS]);
        let mut theta = [AxisAngle::zero(); NUM_JOINTS];
        for (j, t) in theta.iter_mut().enumerate() {
            *t = AxisAngle(v3(THETA_OFFSET + 3 * j));
        }
        Ok(BodyParams { alpha: AxisAngle(v3(ALPHA_OFFSET)), beta, tau: v3(TAU_OFFSET), theta, g: v[G_OFFSET] })
    }

    /// Rotation vectors mapped to magnitude `[0, pi]`.
    pub fn canonicalized(&self) -> Self {
        BodyParams { alpha: self.alpha.canonical(), theta: self.theta.map(|t| t.canonical()), ..*self }
    }

    pub fn is_male(&self) -> bool {
        self.g >= MALE_THRESHOLD
    }
}

/// Fixed-width little-endian record: magic, version u16, value count u16,
/// then the canonicalized parameter vector as f32.
pub fn serialize_params(p: &BodyParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_LEN);
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&(PARAM_LEN as u16).to_le_bytes());
    for v in p.canonicalized().to_vector() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn deserialize_params(bytes: &[u8]) -> Result<BodyParams, BodyError> {
    if bytes.len() != RECORD_LEN {
        return Err(BodyError::Malformed(format!("expected {RECORD_LEN} bytes, got {}", bytes.len())));
    }
    if &bytes[0..4] != RECORD_MAGIC {
        return Err(BodyError::Malformed("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    let count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if version != RECORD_VERSION || count != PARAM_LEN {
        return Err(BodyError::Malformed(format!("unsupported version {version} / count {count}")));
    }
    let v: Vec<f64> = bytes[RECORD_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let p = BodyParams::from_vector(&v)?;
    p.validate().map_err(|e| BodyError::Malformed(e.to_string()))?;
    Ok(p)
}

/// A capsule attached to joint `frame`: from `start` along `axis` (both in the
/// joint's local frame, already shape-scaled).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub frame: usize,
    pub start: Vec3,
    pub axis: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Template {
    offsets: [Vec3; NUM_JOINTS],
    end_segments: Vec<(usize, Vec3)>,
    bone_radius: [f64; NUM_JOINTS],
    end_radius: Vec<f64>,
}

/// The simplified body: kinematic tree, gender templates, shape basis and
/// capsule sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    male: Template,
    female: Template,
    shape_basis: [[[f64; 3]; NUM_BETAS]; NUM_JOINTS],
    rings: usize,
    ring_points: usize,
}

fn mirror(v: Vec3) -> Vec3 {
    Vec3::new(-v.x, v.y, v.z)
}

fn male_template() -> Template {
    let mut o = [Vec3::zeros(); NUM_JOINTS];
    o[1] = Vec3::new(0.09, 0.0, -0.09);
    o[2] = mirror(o[1]);
    o[3] = Vec3::new(0.0, 0.01, 0.11);
    o[4] = Vec3::new(0.01, 0.0, -0.37);
    o[5] = mirror(o[4]);
    o[6] = Vec3::new(0.0, 0.0, 0.13);
    o[7] = Vec3::new(0.0, 0.02, -0.39);
    o[8] = mirror(o[7]);
    o[9] = Vec3::new(0.0, 0.0, 0.06);
    o[10] = Vec3::new(0.0, -0.12, -0.05);
    o[11] = mirror(o[10]);
    o[12] = Vec3::new(0.0, 0.01, 0.21);
    o[13] = Vec3::new(0.07, 0.0, 0.12);
    o[14] = mirror(o[13]);
    o[15] = Vec3::new(0.0, -0.01, 0.10);
    o[16] = Vec3::new(0.11, 0.0, 0.03);
    o[17] = mirror(o[16]);
    o[18] = Vec3::new(0.26, 0.0, 0.0);
    o[19] = mirror(o[18]);
    o[20] = Vec3::new(0.25, 0.0, 0.0);
    o[21] = mirror(o[20]);

    let mut r = [0.0; NUM_JOINTS];
    // Radius of the bone ending at each joint.
    for (j, v) in [
        (1, 0.09),
        (2, 0.09),
        (3, 0.13),
        (4, 0.075),
        (5, 0.075),
        (6, 0.14),
        (7, 0.055),
        (8, 0.055),
        (9, 0.14),
        (10, 0.045),
        (11, 0.045),
        (12, 0.10),
        (13, 0.07),
        (14, 0.07),
        (15, 0.055),
        (16, 0.06),
        (17, 0.06),
        (18, 0.05),
        (19, 0.05),
        (20, 0.04),
        (21, 0.04),
    ] {
        r[j] = v;
    }
    Template {
        offsets: o,
        end_segments: vec![
            (15, Vec3::new(0.0, -0.01, 0.18)),
            (20, Vec3::new(0.17, 0.0, 0.0)),
            (21, Vec3::new(-0.17, 0.0, 0.0)),
            (10, Vec3::new(0.0, -0.08, 0.0)),
            (11, Vec3::new(0.0, -0.08, 0.0)),
        ],
        bone_radius: r,
        end_radius: vec![0.09, 0.04, 0.04, 0.035, 0.035],
    }
}

fn scaled_template(t: &Template, length: f64, girth: f64) -> Template {
    Template {
        offsets: t.offsets.map(|o| o * length),
        end_segments: t.end_segments.iter().map(|(j, v)| (*j, v * length)).collect(),
        bone_radius: t.bone_radius.map(|r| r * girth),
        end_radius: t.end_radius.iter().map(|r| r * girth).collect(),
    }
}

fn default_shape_basis() -> [[[f64; 3]; NUM_BETAS]; NUM_JOINTS] {
    let mut b = [[[0.0; 3]; NUM_BETAS]; NUM_JOINTS];
    for (j, rows) in b.iter_mut().enumerate() {
        // Overall stature.
        rows[0] = [0.1; 3];
        // Hip and shoulder breadth.
        if matches!(j, 1 | 2 | 13 | 14 | 16 | 17) {
            rows[1][0] = 0.08;
        }
        // Leg length.
        if matches!(j, 4 | 5 | 7 | 8) {
            rows[2][2] = 0.06;
        }
        // Arm length.
        if matches!(j, 18..=21) {
            rows[3][0] = 0.06;
        }
        // Torso length.
        if matches!(j, 3 | 6 | 9 | 12) {
            rows[4][2] = 0.06;
        }
        // Neck and head.
        if j == 15 {
            rows[5][2] = 0.05;
        }
        // Small fixed per-joint variations for the remaining components.
        for (r, row) in rows.iter_mut().enumerate().skip(6) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = 0.02 * (1.7 * j as f64 + 2.3 * r as f64 + 0.9 * c as f64).sin();
            }
        }
    }
    b
}

/// Joint positions and global joint rotations of a posed body.
#[derive(Debug, Clone, PartialEq)]
pub struct Posed {
    pub joints: [Vec3; NUM_JOINTS],
    pub rotations: [Mat3; NUM_JOINTS],
}

impl Default for BodyModel {
    fn default() -> Self {
        BodyModel::standard()
    }
}

impl BodyModel {
    pub fn standard() -> Self {
        let male = male_template();
        let female = scaled_template(&male, 0.93, 0.9);
        BodyModel { male, female, shape_basis: default_shape_basis(), rings: 4, ring_points: 8 }
    }

    fn template(&self, male: bool) -> &Template {
        if male {
            &self.male
        } else {
            &self.female
        }
    }

    pub fn parents(&self) -> &'static [Option<usize>; NUM_JOINTS] {
        &PARENTS
    }

    pub fn shape_basis(&self) -> &[[[f64; 3]; NUM_BETAS]; NUM_JOINTS] {
        &self.shape_basis
    }

    /// Rest offset of joint `j` relative to its parent for the given template.
    pub fn rest_offset(&self, male: bool, j: usize) -> Vec3 {
        self.template(male).offsets[j]
    }

    /// Per-axis shape factor `1 + B_j^T beta` for joint `j`.
    pub fn shape_scale(&self, j: usize, beta: &[f64; NUM_BETAS]) -> Vec3 {
        let mut s = Vec3::new(1.0, 1.0, 1.0);
        for (row, b) in self.shape_basis[j].iter().zip(beta) {
            s += Vec3::new(row[0], row[1], row[2]) * *b;
        }
        s
    }

    pub fn scaled_offset(&self, male: bool, j: usize, beta: &[f64; NUM_BETAS]) -> Vec3 {
        self.template(male).offsets[j].component_mul(&self.shape_scale(j, beta))
    }

    /// Joint positions of the rest pose with zero shape at the origin.
    pub fn rest_joints(&self, male: bool) -> [Vec3; NUM_JOINTS] {
        let mut j = [Vec3::zeros(); NUM_JOINTS];
        for i in 1..NUM_JOINTS {
            j[i] = j[PARENTS[i].expect("non-root joint")] + self.template(male).offsets[i];
        }
        j
    }

    pub fn pose(&self, p: &BodyParams) -> Posed {
        let male = p.is_male();
        let rot = |a: &AxisAngle| *axis_angle_to_rot(a).expect("finite parameters").matrix();
        let mut rotations = [Mat3::identity(); NUM_JOINTS];
        let mut joints = [Vec3::zeros(); NUM_JOINTS];
        rotations[0] = rot(&p.alpha) * rot(&p.theta[0]);
        joints[0] = p.tau;
        for i in 1..NUM_JOINTS {
            let parent = PARENTS[i].expect("non-root joint");
            joints[i] = joints[parent] + rotations[parent] * self.scaled_offset(male, i, &p.beta);
            rotations[i] = rotations[parent] * rot(&p.theta[i]);
        }
        Posed { joints, rotations }
    }

    pub fn forward_joints(&self, p: &BodyParams) -> [Vec3; NUM_JOINTS] {
        self.pose(p).joints
    }

    /// Capsules of the body in local joint frames: one per bone plus end
    /// segments for the head, hands and feet.
    pub fn capsules(&self, male: bool, beta: &[f64; NUM_BETAS]) -> Vec<Capsule> {
        let t = self.template(male);
        let girth = 1.0 + 0.1 * beta[0];
        let mut out = Vec::with_capacity(NUM_JOINTS - 1 + t.end_segments.len());
        for j in 1..NUM_JOINTS {
            out.push(Capsule {
                frame: PARENTS[j].expect("non-root joint"),
                start: Vec3::zeros(),
                axis: self.scaled_offset(male, j, beta),
                radius: t.bone_radius[j] * girth,
            });
        }
        for ((j, axis), r) in t.end_segments.iter().zip(&t.end_radius) {
            out.push(Capsule {
                frame: *j,
                start: Vec3::zeros(),
                axis: axis.component_mul(&self.shape_scale(*j, beta)),
                radius: r * girth,
            });
        }
        out
    }

    pub fn vertices_per_capsule(&self) -> usize {
        self.rings * self.ring_points + 2
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices_per_capsule() * (NUM_JOINTS - 1 + self.male.end_segments.len())
    }

    /// Capsule surface samples in the capsule's local frame.
    pub fn capsule_samples(&self, c: &Capsule) -> Vec<Vec3> {
        let len = c.axis.norm();
        let dir = if len > 0.0 { c.axis / len } else { Vec3::z() };
        let helper = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = dir.cross(&helper).normalize();
        let w = dir.cross(&u);
        let mut out = Vec::with_capacity(self.vertices_per_capsule());
        out.push(c.start - dir * c.radius);
        for ring in 0..self.rings {
            let t = (ring as f64 + 0.5) / self.rings as f64;
            for k in 0..self.ring_points {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / self.ring_points as f64;
                out.push(c.start + c.axis * t + (u * phi.cos() + w * phi.sin()) * c.radius);
            }
        }
        out.push(c.start + c.axis + dir * c.radius);
        out
    }

    pub fn forward_vertices(&self, p: &BodyParams) -> Vec<Vec3> {
        let posed = self.pose(p);
        let mut out = Vec::with_capacity(self.vertex_count());
        for c in self.capsules(p.is_male(), &p.beta) {
            let (origin, r) = (posed.joints[c.frame], posed.rotations[c.frame]);
            out.extend(self.capsule_samples(&c).into_iter().map(|v| origin + r * v));
        }
        out
    }

    /// World-space capsule segments `(a, b, radius)` of a posed body.
    pub fn posed_capsules(&self, p: &BodyParams) -> Vec<(Vec3, Vec3, f64)> {
        let posed = self.pose(p);
        self.capsules(p.is_male(), &p.beta)
            .iter()
            .map(|c| {
                let (origin, r) = (posed.joints[c.frame], posed.rotations[c.frame]);
                (origin + r * c.start, origin + r * (c.start + c.axis), c.radius)
            })
            .collect()
    }
}

/// CSV export of joint positions: `joint,name,x,y,z`.
pub fn joints_to_csv(joints: &[Vec3; NUM_JOINTS]) -> String {
    let mut s = String::from("joint,name,x,y,z\n");
    for (i, j) in joints.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{:.6},{:.6},{:.6}", JOINT_NAMES[i], j.x, j.y, j.z);
    }
    s
}

/// Loss weights of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_2d: f64,
    pub lambda_mesh: f64,
    pub lambda_theta: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub lambda_tau: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_2d: 1.0,
            lambda_mesh: 1.0,
            lambda_theta: 15.0,
            lambda_alpha: 1.0,
            lambda_beta: 0.3,
            lambda_tau: 10.0,
            lambda_g: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), BodyError> {
        let all = [
            self.lambda_2d,
            self.lambda_mesh,
            self.lambda_theta,
            self.lambda_alpha,
            self.lambda_beta,
            self.lambda_tau,
            self.lambda_g,
        ];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(BodyError::InvalidParams("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Geodesic angle between the rotations of two rotation vectors.
pub fn rotation_distance(a: &AxisAngle, b: &AxisAngle) -> f64 {
    crate::geometry::relative_angle(axis_angle_to_rot(a).expect("finite").matrix(), axis_angle_to_rot(b).expect("finite").matrix())
}

/// Geodesic angle between `exp(w)` and `target` and its gradient in `w`.
/// The subgradient is zero where the angle is 0 or pi.
fn rotation_distance_grad(w: &Vec3, target: &Rot3) -> (f64, Vec3) {
    let r = axis_angle_to_rot(&AxisAngle(*w)).expect("finite");
    let d = target.transpose() * r;
    let angle = crate::geometry::relative_angle(target.matrix(), r.matrix());
    if angle == 0.0 || angle >= std::f64::consts::PI - 1e-9 {
        return (angle, Vec3::zeros());
    }
    let phi = rot_to_axis_angle(&d).expect("product of rotations").0;
    let n = phi.norm();
    if n == 0.0 {
        return (angle, Vec3::zeros());
    }
    // Right Jacobian columns of the exponential map: vee(R^T dR/dw_k).
    let de = exp_derivatives(w);
    let rt = r.matrix().transpose();
    let unit = phi / n;
    let grad = Vec3::from_fn(|k, _| vee(&(rt * de[k])).dot(&unit));
    (angle, grad)
}

/// Individual weighted terms of the mesh loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeshLossTerms {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub g: f64,
}

impl MeshLossTerms {
    pub fn total(&self) -> f64 {
        self.theta + self.alpha + self.beta + self.tau + self.g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshLoss {
    pub value: f64,
    pub terms: MeshLossTerms,
    /// Gradient with respect to the flat prediction vector.
    pub gradient: [f64; PARAM_LEN],
}

fn entropy_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// Binary cross-entropy of the clamped prediction, minus the entropy of the
/// target so identical inputs score zero. Returns value and d/d(pred).
pub fn gender_loss(pred: f64, target: f64) -> (f64, f64) {
    let q = pred.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    let value = entropy_term(target, q) + entropy_term(1.0 - target, 1.0 - q);
    let grad = if pred > BCE_EPSILON && pred < 1.0 - BCE_EPSILON { -target / q + (1.0 - target) / (1.0 - q) } else { 0.0 };
    (value.max(0.0), grad)
}

/// Weighted sum of the rotation, shape, translation and gender terms with
/// its gradient in the prediction.
pub fn mesh_loss(pred: &BodyParams, gt: &BodyParams, w: &LossWeights) -> MeshLoss {
    let mut gradient = [0.0; PARAM_LEN];
    let mut terms = MeshLossTerms::default();

    let mut theta_sum = 0.0;
    for j in 0..NUM_JOINTS {
        let target = axis_angle_to_rot(&gt.theta[j]).expect("finite");
        let (a, g) = rotation_distance_grad(pred.theta[j].vector(), &target);
        theta_sum += a;
        let scale = w.lambda_theta / NUM_JOINTS as f64;
        for k in 0..3 {
            gradient[THETA_OFFSET + 3 * j + k] = scale * g[k];
        }
    }
    terms.theta = w.lambda_theta * theta_sum / NUM_JOINTS as f64;

    let target = axis_angle_to_rot(&gt.alpha).expect("finite");
    let (a, g) = rotation_distance_grad(pred.alpha.vector(), &target);
    terms.alpha = w.lambda_alpha * a;
    for k in 0..3 {
        gradient[ALPHA_OFFSET + k] = w.lambda_alpha * g[k];
    }

    for i in 0..NUM_BETAS {
        let d = pred.beta[i] - gt.beta[i];
        terms.beta += w.lambda_beta * d * d;
        gradient[BETA_OFFSET + i] = 2.0 * w.lambda_beta * d;
    }

    for k in 0..3 {
        let d = pred.tau[k] - gt.tau[k];
        terms.tau += w.lambda_tau * d.abs();
        gradient[TAU_OFFSET + k] = if d > 0.0 {
            w.lambda_tau
        } else if d < 0.0 {
            -w.lambda_tau
        } else {
            0.0
        };
    }

    let (gv, gg) = gender_loss(pred.g, gt.g);
    terms.g = w.lambda_g * gv;
    gradient[G_OFFSET] = w.lambda_g * gg;

    MeshLoss { value: terms.total(), terms, gradient }
}

/// `|x - tau_x| + |y - tau_y|` and its gradient in `(x, y)`.
pub fn bev_loss(pred_xy: (f64, f64), gt_tau: &Vec3) -> (f64, [f64; 2]) {
    let dx = pred_xy.0 - gt_tau.x;
    let dy = pred_xy.1 - gt_tau.y;
    let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    (dx.abs() + dy.abs(), [sign(dx), sign(dy)])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub bev: f64,
    pub mesh: f64,
}

/// `lambda_2d * L_2d + lambda_mesh * L_mesh`.
pub fn total_loss(pred_xy: (f64, f64), pred: &BodyParams, gt: &BodyParams, w: &LossWeights) -> TotalLoss {
    let bev = bev_loss(pred_xy, &gt.tau).0;
    let mesh = mesh_loss(pred, gt, w).value;
    TotalLoss { value: w.lambda_2d * bev + w.lambda_mesh * mesh, bev, mesh }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Whether two gradient components agree to `rel` relative error, with an
/// absolute floor `abs`.
pub fn gradients_agree(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs || diff <= rel * a.abs().max(b.abs())
}
