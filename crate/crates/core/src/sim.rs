//! Synthetic radar scenes: body motion for the three action families,
//! point-scatterer rendering onto the voxel grid, and paired ground truth.
//!
//! Scatterers sit on the body's joints and capsule samples. Each contributes
//! a 3D Gaussian of width `scatterer_sigma`, truncated to a box of ±3 sigma
//! per axis and renormalized so its voxel sum equals the amplitude
//! `reflectivity / r^2`. Scatterers near the grid edge lose the clipped part.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{BodyModel, BodyParams, NUM_BETAS, NUM_JOINTS};
use crate::geometry::{AxisAngle, Vec3};
use crate::store::SampleKey;
use crate::sync::MarkerTrack;
use crate::tensor::{GridGeometry, RadarTensor, TensorError};

/// Pelvis height of the standing template, meters.
pub const STANDING_ROOT_HEIGHT: f64 = 0.95;
/// Pelvis height when seated.
pub const SEATED_ROOT_HEIGHT: f64 = 0.55;
/// Splat truncation half-width in units of sigma.
pub const SPLAT_TRUNCATION: f64 = 3.0;
/// Lateral head displacement of the trigger swing, meters.
pub const TRIGGER_SWING: f64 = 0.15;
/// Duration of the trigger swing, seconds.
pub const TRIGGER_SWING_DURATION: f64 = 0.3;

pub const P1_ACTIONS: std::ops::RangeInclusive<u16> = 1..=30;
pub const P2_ACTIONS: std::ops::RangeInclusive<u16> = 31..=35;
pub const P3_ACTIONS: std::ops::RangeInclusive<u16> = 36..=50;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    InPlace,
    SitInPlace,
    NonInPlace,
}

impl Family {
    /// Family of an action id in the 50-action catalogue.
    pub fn of_action(action: u16) -> Option<Family> {
        if P1_ACTIONS.contains(&action) {
            Some(Family::InPlace)
        } else if P2_ACTIONS.contains(&action) {
            Some(Family::SitInPlace)
        } else if P3_ACTIONS.contains(&action) {
            Some(Family::NonInPlace)
        } else {
            None
        }
    }
}

/// How measurement noise is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Folded Gaussian added to every voxel with a nonzero noiseless return.
    Support,
    /// Folded Gaussian added to every voxel of the grid.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clutter {
    pub position: [f64; 3],
    pub reflectivity: f64,
}

/// Which limb groups oscillate and how.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionPattern {
    pub arms: f64,
    pub elbows: f64,
    pub legs: f64,
    pub torso: f64,
    pub phase: f64,
}

impl Default for MotionPattern {
    fn default() -> Self {
        MotionPattern { arms: 1.0, elbows: 0.5, legs: 0.3, torso: 0.1, phase: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub family: Family,
    pub duration_s: f64,
    pub sensor_rate: f64,
    pub mocap_rate: f64,
    pub seed: u64,
    pub subject_id: u16,
    pub action_id: u16,
    pub gender: f64,
    pub beta: [f64; NUM_BETAS],
    /// Root position on the floor plane at time zero.
    pub position: [f64; 2],
    /// Rotation about the vertical axis; zero faces the sensor (-y).
    pub yaw: f64,
    /// Peak joint rotation of the limb oscillation, radians.
    pub amplitude: f64,
    pub period_s: f64,
    pub pattern: MotionPattern,
    /// Floor-plane path for the non-in-place family, starting at `position`.
    pub waypoints: Vec<[f64; 2]>,
    pub speed: f64,
    pub reflectivity: f64,
    pub noise_floor: f64,
    pub noise_model: NoiseModel,
    pub clutter: Vec<Clutter>,
    pub scatterer_sigma: f64,
    pub sensor_position: [f64; 3],
    /// MoCap sample at which the trigger swing starts.
    pub trigger_frame: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            family: Family::InPlace,
            duration_s: 2.0,
            sensor_rate: crate::sync::DEFAULT_SENSOR_RATE,
            mocap_rate: crate::sync::DEFAULT_MOCAP_RATE,
            seed: 0,
            subject_id: 1,
            action_id: 1,
            gender: 1.0,
            beta: [0.0; NUM_BETAS],
            position: [0.0, 3.0],
            yaw: 0.0,
            amplitude: 0.6,
            period_s: 2.0,
            pattern: MotionPattern::default(),
            waypoints: Vec::new(),
            speed: 1.0,
            reflectivity: 1.0,
            noise_floor: 0.004,
            noise_model: NoiseModel::Support,
            clutter: Vec::new(),
            scatterer_sigma: 0.05,
            sensor_position: [0.0, 0.0, 1.0],
            trigger_frame: 50,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration_s must be positive");
        }
        if !(self.sensor_rate > 0.0 && self.mocap_rate > 0.0 && self.sensor_rate.is_finite() && self.mocap_rate.is_finite()) {
            return bad("rates must be positive");
        }
        if !(self.scatterer_sigma > 0.0 && self.scatterer_sigma.is_finite()) {
            return bad("scatterer_sigma must be positive");
        }
        if !(self.period_s > 0.0) || !(self.speed >= 0.0) || !(self.reflectivity >= 0.0) || !(self.noise_floor >= 0.0) {
            return bad("period must be positive; speed, reflectivity and noise_floor non-negative");
        }
        if !(0.0..=1.0).contains(&self.gender) {
            return bad("gender must lie in [0, 1]");
        }
        let finite = self.beta.iter().chain(&self.position).chain(&self.sensor_position).all(|v| v.is_finite())
            && self.yaw.is_finite()
            && self.amplitude.is_finite()
            && self.waypoints.iter().flatten().all(|v| v.is_finite())
            && self.clutter.iter().all(|c| c.position.iter().all(|v| v.is_finite()) && c.reflectivity >= 0.0);
        if !finite {
            return bad("non-finite scenario value");
        }
        Ok(())
    }

    /// Number of sensor frames in the scenario.
    pub fn frame_count(&self) -> usize {
        ((self.duration_s * self.sensor_rate).round() as usize).max(1)
    }

    /// A scenario for one clip of the 50-action catalogue. Motion style,
    /// position and shape are derived deterministically from the ids.
    pub fn for_action(subject: u16, action: u16, seed: u64) -> Result<ScenarioConfig, SimError> {
        use rand::Rng;
        let family = Family::of_action(action)
            .ok_or_else(|| SimError::InvalidConfig(format!("action {action} outside the catalogue 1..=50")))?;
        let mut subject_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5u64.wrapping_mul(1 + subject as u64));
        let mut beta = [0.0; NUM_BETAS];
        for b in &mut beta {
            *b = subject_rng.gen_range(-1.0..1.0);
        }
        let gender = if subject % 2 == 1 { 1.0 } else { 0.0 };
        let mut clip_rng = ChaCha8Rng::seed_from_u64(seed ^ ((subject as u64) << 32 | action as u64).wrapping_mul(0x9E37_79B9));
        let a = action as f64;
        let pattern = MotionPattern {
            arms: 0.5 + 0.5 * (a * 1.3).sin().abs(),
            elbows: 0.6 * (a * 0.7).cos().abs(),
            legs: 0.4 * (a * 2.1).sin().abs(),
            torso: 0.15 * (a * 0.9).cos(),
            phase: (a * 0.37) % (2.0 * PI),
        };
        let position = [clip_rng.gen_range(-0.8..0.8), clip_rng.gen_range(2.5..3.5)];
        let yaw = clip_rng.gen_range(-0.4..0.4);
        let waypoints = if family == Family::NonInPlace {
            let heading = clip_rng.gen_range(0.0..2.0 * PI);
            vec![[position[0] + 0.8 * heading.cos(), position[1] + 0.8 * heading.sin()], position]
        } else {
            Vec::new()
        };
        Ok(ScenarioConfig {
            family,
            seed: seed.wrapping_add(((subject as u64) << 16) + action as u64),
            subject_id: subject,
            action_id: action,
            gender,
            beta,
            position,
            yaw,
            amplitude: 0.3 + 0.5 * ((a * 0.53).sin() * 0.5 + 0.5),
            period_s: 1.5 + (action % 4) as f64 * 0.5,
            pattern,
            waypoints,
            speed: 0.5,
            ..ScenarioConfig::default()
        })
    }
}

fn aa(x: f64, y: f64, z: f64) -> AxisAngle {
    AxisAngle::new(x, y, z)
}

/// Floor-plane position and walking direction after `distance` meters along
/// the polyline `start -> waypoints...`; stays at the last point.
fn walk(start: [f64; 2], waypoints: &[[f64; 2]], distance: f64) -> ([f64; 2], [f64; 2]) {
    let mut from = start;
    let mut remaining = distance;
    let mut dir = [0.0, -1.0];
    for w in waypoints {
        let d = [w[0] - from[0], w[1] - from[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if len == 0.0 {
            continue;
        }
        dir = [d[0] / len, d[1] / len];
        if remaining <= len {
            return ([from[0] + dir[0] * remaining, from[1] + dir[1] * remaining], dir);
        }
        remaining -= len;
        from = *w;
    }
    (from, dir)
}

/// Ground-truth body parameters at time `t` seconds.
pub fn params_at(c: &ScenarioConfig, t: f64) -> BodyParams {
    let mut p = BodyParams { beta: c.beta, g: c.gender, ..Default::default() };
    let w = 2.0 * PI / c.period_s;
    let s = (w * t + c.pattern.phase).sin();
    let amp = c.amplitude;
    let pat = &c.pattern;
    let mut yaw = c.yaw;
    let mut root = [c.position[0], c.position[1]];
    let mut height = STANDING_ROOT_HEIGHT;
    match c.family {
        Family::InPlace => {
            p.theta[16] = aa(0.0, amp * pat.arms * s, 0.0);
            p.theta[17] = aa(0.0, amp * pat.arms * s, 0.0);
            p.theta[18] = aa(0.0, 0.0, amp * pat.elbows * (s * 0.5 + 0.5));
            p.theta[19] = aa(0.0, 0.0, -amp * pat.elbows * (s * 0.5 + 0.5));
            p.theta[1] = aa(-amp * pat.legs * s.max(0.0), 0.0, 0.0);
            p.theta[4] = aa(amp * pat.legs * s.max(0.0), 0.0, 0.0);
            p.theta[3] = aa(amp * pat.torso * s, 0.0, 0.0);
        }
        Family::SitInPlace => {
            height = SEATED_ROOT_HEIGHT;
            let kick = amp * (pat.legs + 0.3) * (s * 0.5 + 0.5);
            p.theta[1] = aa(-PI / 2.0, 0.0, 0.0);
            p.theta[2] = aa(-PI / 2.0, 0.0, 0.0);
            p.theta[4] = aa(PI / 2.0 - kick, 0.0, 0.0);
            p.theta[5] = aa(PI / 2.0 - kick * 0.5, 0.0, 0.0);
            p.theta[16] = aa(0.0, amp * pat.arms * 0.5 * s, 0.0);
            p.theta[17] = aa(0.0, amp * pat.arms * 0.5 * s, 0.0);
        }
        Family::NonInPlace => {
            let (pos, dir) = walk(c.position, &c.waypoints, c.speed * t);
            root = pos;
            if !c.waypoints.is_empty() {
                yaw = dir[0].atan2(-dir[1]);
            }
            let gait = (w * t).sin();
            let swing = amp * (0.4 + pat.legs);
            p.theta[1] = aa(-swing * gait, 0.0, 0.0);
            p.theta[2] = aa(swing * gait, 0.0, 0.0);
            p.theta[4] = aa(swing * gait.max(0.0), 0.0, 0.0);
            p.theta[5] = aa(swing * (-gait).max(0.0), 0.0, 0.0);
            p.theta[16] = aa(swing * gait, 0.0, 0.0);
            p.theta[17] = aa(-swing * gait, 0.0, 0.0);
        }
    }
    // Hold the arms in a relaxed A-pose: rotate the shoulders down.
    let down = 1.1;
    p.theta[16] = AxisAngle(p.theta[16].vector() + Vec3::new(0.0, down, 0.0));
    p.theta[17] = AxisAngle(p.theta[17].vector() + Vec3::new(0.0, -down, 0.0));
    p.alpha = aa(0.0, 0.0, yaw);
    p.tau = Vec3::new(root[0], root[1], height);
    p
}

/// Ground-truth parameters for every sensor frame.
pub fn generate_motion(c: &ScenarioConfig) -> Result<Vec<BodyParams>, SimError> {
    c.validate()?;
    Ok((0..c.frame_count()).map(|j| params_at(c, j as f64 / c.sensor_rate)).collect())
}

/// A point reflector with amplitude already including range attenuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub position: Vec3,
    pub amplitude: f64,
}

fn range_amplitude(reflectivity: f64, p: &Vec3, sensor: &Vec3) -> f64 {
    let r2 = (p - sensor).norm_squared().max(1e-6);
    reflectivity / r2
}

/// Scatterers on the body's joints and capsule samples, plus clutter.
pub fn scene_scatterers(model: &BodyModel, params: &BodyParams, c: &ScenarioConfig) -> Vec<Scatterer> {
    let sensor = Vec3::from(c.sensor_position);
    let mut out: Vec<Scatterer> = model
        .forward_joints(params)
        .iter()
        .chain(model.forward_vertices(params).iter())
        .map(|p| Scatterer { position: *p, amplitude: range_amplitude(c.reflectivity, p, &sensor) })
        .collect();
    for cl in &c.clutter {
        let p = Vec3::from(cl.position);
        out.push(Scatterer { position: p, amplitude: range_amplitude(cl.reflectivity, &p, &sensor) });
    }
    out
}

/// Adds a truncated, normalized Gaussian of integral `s.amplitude` to `acc`.
pub fn splat(g: &GridGeometry, acc: &mut [f64], s: &Scatterer, sigma: f64) {
    let dims = g.dims();
    let pitch = g.pitch();
    let origin = g.origin();
    let reach = SPLAT_TRUNCATION * sigma;
    let mut ranges = [(0usize, 0usize); 3];
    for a in 0..3 {
        // The small slack keeps lattice points that sit exactly on the
        // truncation boundary from being lost to rounding.
        let lo = ((s.position[a] - reach - origin[a]) / pitch[a] - 1e-6).ceil();
        let hi = ((s.position[a] + reach - origin[a]) / pitch[a] + 1e-6).floor();
        let lo = lo.max(0.0);
        let hi = hi.min(dims[a] as f64 - 1.0);
        if lo > hi {
            return;
        }
        ranges[a] = (lo as usize, hi as usize);
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let axis_weights = |a: usize| -> Vec<f64> {
        (ranges[a].0..=ranges[a].1)
            .map(|i| {
                let d = origin[a] + i as f64 * pitch[a] - s.position[a];
                (-d * d * inv).exp()
            })
            .collect()
    };
    let (wx, wy, wz) = (axis_weights(0), axis_weights(1), axis_weights(2));
    let unclipped = |a: usize| -> f64 {
        let first = ((s.position[a] - reach - origin[a]) / pitch[a] - 1e-6).ceil() as i64;
        let last = ((s.position[a] + reach - origin[a]) / pitch[a] + 1e-6).floor() as i64;
        (first..=last)
            .map(|i| {
                let d = origin[a] + i as f64 * pitch[a] - s.position[a];
                (-d * d * inv).exp()
            })
            .sum()
    };
    let norm = s.amplitude / (unclipped(0) * unclipped(1) * unclipped(2));
    for (a, fx) in wx.iter().enumerate() {
        let i = ranges[0].0 + a;
        for (b, fy) in wy.iter().enumerate() {
            let j = ranges[1].0 + b;
            let base = g.linear_index(i, j, ranges[2].0);
            let fxy = norm * fx * fy;
            for (c, fz) in wz.iter().enumerate() {
                acc[base + c] += fxy * fz;
            }
        }
    }
}

/// Noise-free intensity volume of a set of scatterers.
pub fn render_scatterers(g: &GridGeometry, scatterers: &[Scatterer], sigma: f64) -> Vec<f64> {
    let mut acc = vec![0.0f64; g.len()];
    for s in scatterers {
        splat(g, &mut acc, s, sigma);
    }
    acc
}

fn frame_rng(seed: u64, frame: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame);
    rng
}

/// Renders one radar frame. Noise draws come from a stream keyed by
/// `(c.seed, frame)` so frames can be rendered in any order.
pub fn render_frame(
    g: &GridGeometry,
    model: &BodyModel,
    params: &BodyParams,
    c: &ScenarioConfig,
    frame: u64,
) -> Result<RadarTensor, SimError> {
    let scatterers = scene_scatterers(model, params, c);
    let mut acc = render_scatterers(g, &scatterers, c.scatterer_sigma);
    if c.noise_floor > 0.0 {
        let normal = Normal::new(0.0, c.noise_floor).expect("positive noise floor");
        let mut rng = frame_rng(c.seed, frame);
        for v in acc.iter_mut() {
            if c.noise_model == NoiseModel::Dense || *v > 0.0 {
                *v += normal.sample(&mut rng).abs();
            }
        }
    }
    let values = acc.into_iter().map(|v| v as f32).collect();
    Ok(RadarTensor::new(*g, values)?)
}

/// A rendered clip with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<RadarTensor>,
    pub gt: Vec<BodyParams>,
    pub marker_track: MarkerTrack,
    pub keys: Vec<SampleKey>,
    pub trigger_frame: usize,
}

/// Head-top marker position of a posed body.
pub fn head_top(model: &BodyModel, p: &BodyParams) -> Vec3 {
    let posed = model.pose(p);
    let caps = model.capsules(p.is_male(), &p.beta);
    let head = caps.iter().find(|c| c.frame == 15).expect("head segment");
    posed.joints[15] + posed.rotations[15] * (head.start + head.axis)
}

/// MoCap head-top track: a held T-pose until `trigger_frame`, a lateral
/// swing of [`TRIGGER_SWING`] starting exactly there, then the clip motion.
pub fn synthesize_marker_track(model: &BodyModel, c: &ScenarioConfig) -> Result<MarkerTrack, SimError> {
    c.validate()?;
    let tpose = BodyParams {
        beta: c.beta,
        g: c.gender,
        alpha: aa(0.0, 0.0, c.yaw),
        tau: Vec3::new(c.position[0], c.position[1], STANDING_ROOT_HEIGHT),
        ..Default::default()
    };
    let rest = head_top(model, &tpose);
    let n_motion = (c.duration_s * c.mocap_rate).ceil() as usize + 1;
    let mut samples = vec![rest; c.trigger_frame];
    for i in 0..n_motion {
        let t = i as f64 / c.mocap_rate;
        let mut p = head_top(model, &params_at(c, t));
        if t < TRIGGER_SWING_DURATION {
            p.x += TRIGGER_SWING;
        }
        samples.push(p);
    }
    let valid = vec![true; samples.len()];
    MarkerTrack::uniform(c.mocap_rate, samples, valid).map_err(|e| SimError::InvalidConfig(e.to_string()))
}

pub fn generate_sequence(c: &ScenarioConfig, g: &GridGeometry) -> Result<SyntheticSequence, SimError> {
    let model = BodyModel::standard();
    let gt = generate_motion(c)?;
    let frames = gt
        .par_iter()
        .enumerate()
        .map(|(j, p)| render_frame(g, &model, p, c, j as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let keys = (0..gt.len()).map(|j| SampleKey::new(c.subject_id, c.action_id, j as u32)).collect();
    let marker_track = synthesize_marker_track(&model, c)?;
    Ok(SyntheticSequence { frames, gt, marker_track, keys, trigger_frame: c.trigger_frame })
}

/// Joint count re-exported for callers sizing buffers.
pub const JOINTS_PER_BODY: usize = NUM_JOINTS;

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(c: ScenarioConfig) -> ScenarioConfig {
        ScenarioConfig { noise_floor: 0.0, ..c }
    }

    #[test]
    fn zero_amplitude_is_static() {
        let c = ScenarioConfig { amplitude: 0.0, ..ScenarioConfig::default() };
        let m = generate_motion(&c).unwrap();
        assert!(m.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(m.len(), 24);
    }

    #[test]
    fn straight_walk_covers_distance() {
        let c = ScenarioConfig {
            family: Family::NonInPlace,
            position: [-1.0, 3.0],
            waypoints: vec![[2.0, 3.0]],
            speed: 1.0,
            ..ScenarioConfig::default()
        };
        let p0 = params_at(&c, 0.0);
        let p2 = params_at(&c, 2.0);
        assert!(((p2.tau - p0.tau) - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        // Walking toward +x means facing +x.
        let fwd = crate::geometry::axis_angle_to_rot(&p2.alpha).unwrap().rotate(&Vec3::new(0.0, -1.0, 0.0));
        assert!((fwd - Vec3::x()).norm() < 1e-12);
    }

    #[test]
    fn sequences_are_deterministic() {
        let g = GridGeometry::radar_default();
        let c = ScenarioConfig { duration_s: 0.5, ..ScenarioConfig::default() };
        let a = generate_sequence(&c, &g).unwrap();
        let b = generate_sequence(&c, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), a.gt.len());
        assert_eq!(a.keys.len(), a.gt.len());
        let serial: Vec<_> = a
            .gt
            .iter()
            .enumerate()
            .map(|(j, p)| render_frame(&g, &BodyModel::standard(), p, &c, j as u64).unwrap())
            .collect();
        assert_eq!(serial, a.frames);
    }

    #[test]
    fn single_scatterer_peaks_at_its_voxel() {
        let g = GridGeometry::radar_default();
        let target = g.voxel_center([40, 60, 12]);
        let acc = render_scatterers(&g, &[Scatterer { position: target, amplitude: 1.0 }], 0.05);
        let argmax = (0..acc.len()).max_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap();
        assert_eq!(g.unravel(argmax), [40, 60, 12]);
    }

    #[test]
    fn amplitude_falls_with_range_squared() {
        let g = GridGeometry::radar_default();
        let sensor = g.voxel_center([60, 0, 12]);
        let near = [60usize, 30, 12];
        let far = [60usize, 60, 12];
        let peak = |idx: [usize; 3]| {
            let p = g.voxel_center(idx.map(|v| v as i64));
            let s = Scatterer { position: p, amplitude: range_amplitude(1.0, &p, &sensor) };
            render_scatterers(&g, &[s], 0.05)[g.linear_index(idx[0], idx[1], idx[2])]
        };
        let ratio = peak(near) / peak(far);
        assert!((ratio - 4.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn splat_conserves_energy() {
        let g = GridGeometry::new([60, 60, 60], Vec3::zeros(), Vec3::new(0.05, 0.05, 0.05)).unwrap();
        for (sigma, offset) in [(0.05, 0.0), (0.05, 0.013), (0.08, 0.021), (0.12, 0.037)] {
            let p = Vec3::new(1.5 + offset, 1.5 - offset, 1.5 + 0.5 * offset);
            let acc = render_scatterers(&g, &[Scatterer { position: p, amplitude: 2.0 }], sigma);
            let total: f64 = acc.iter().sum();
            assert!((total / 2.0 - 1.0).abs() < 1e-12, "sigma {sigma}: integral {total}");
        }
    }

    #[test]
    fn noise_free_joints_are_in_support() {
        let g = GridGeometry::radar_default();
        let model = BodyModel::standard();
        let base = ScenarioConfig::default();
        for pos in [[0.0, 1.0], [1.5, 3.0], [-2.0, 5.5]] {
            let c = quiet(ScenarioConfig { position: pos, ..base.clone() });
            for p in generate_motion(&c).unwrap().iter().step_by(7) {
                let t = render_frame(&g, &model, p, &c, 0).unwrap();
                for j in model.forward_joints(p) {
                    let idx = g.world_to_voxel(&j).unwrap();
                    assert!(t.get(idx[0], idx[1], idx[2]) as f64 >= 3.0 * base.noise_floor);
                }
            }
        }
    }

    #[test]
    fn planted_trigger_is_recovered() {
        let model = BodyModel::standard();
        for (family, trigger) in [(Family::InPlace, 37), (Family::SitInPlace, 80), (Family::NonInPlace, 5)] {
            let c = ScenarioConfig {
                family,
                trigger_frame: trigger,
                waypoints: vec![[1.0, 3.0]],
                ..ScenarioConfig::default()
            };
            let track = synthesize_marker_track(&model, &c).unwrap();
            assert_eq!(crate::sync::detect_trigger(&track, 0.10).unwrap(), trigger);
        }
    }

    #[test]
    fn catalogue_scenarios_are_valid() {
        for action in 1..=50 {
            let c = ScenarioConfig::for_action(3, action, 7).unwrap();
            c.validate().unwrap();
            assert_eq!(Some(c.family), Family::of_action(action));
        }
        assert!(ScenarioConfig::for_action(1, 51, 0).is_err());
    }
}
