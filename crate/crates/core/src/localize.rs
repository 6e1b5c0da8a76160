//! BEV localization, RoI feature pooling and a linear parameter regressor.

use std::collections::VecDeque;
use std::io::{Read, Write};

use thiserror::Error;

use crate::body::{
    mesh_loss, total_loss, BodyError, BodyParams, LossWeights, G_OFFSET, PARAM_LEN, TAU_OFFSET,
};
use crate::geometry::Vec3;
use crate::tensor::{bev_collapse, crop_roi, FrameStack, TensorError, DEFAULT_ROI};

pub const DEFAULT_ROOT_HEIGHT: f64 = 0.9;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M4LR";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const CHECKPOINT_HEADER_LEN: usize = 24;

/// Number of pooled features for a crop of depth `nz`: one energy fraction
/// per z-slab, three means, three variances and the log total energy.
pub const fn feature_len(nz: usize) -> usize {
    nz + 7
}

pub const DEFAULT_FEATURE_LEN: usize = feature_len(DEFAULT_ROI[2]);

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("no target: the stack carries no energy")]
    NoTarget,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevLocalization {
    pub xy: (f64, f64),
    pub peak_intensity: f64,
    pub confidence: f64,
}

fn box_filter(map: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let mut out = vec![0.0; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            let mut s = 0.0;
            for a in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                for b in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                    s += map[a * ny + b];
                }
            }
            out[i * ny + j] = s / 9.0;
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Finds the dominant target in the bird's-eye view of `s`.
///
/// Channels are summed, the map is smoothed with a zero-padded 3×3 box
/// filter, and the 8-connected region around the maximum (first in index
/// order on ties) whose smoothed value exceeds half the peak is reduced to
/// its intensity-weighted centroid.
pub fn localize_bev(s: &FrameStack) -> Result<BevLocalization, LocalizeError> {
    let g = s.geometry();
    let [nx, ny, _] = g.dims();
    let bev = bev_collapse(s);
    let smooth = box_filter(&bev.channel_sum(), nx, ny);

    let mut peak_idx = 0;
    for (idx, &v) in smooth.iter().enumerate() {
        if v > smooth[peak_idx] {
            peak_idx = idx;
        }
    }
    let peak = smooth[peak_idx];
    if !(peak > 0.0) {
        return Err(LocalizeError::NoTarget);
    }

    let half = 0.5 * peak;
    let mut in_region = vec![false; nx * ny];
    in_region[peak_idx] = true;
    let mut queue = VecDeque::from([peak_idx]);
    let (mut wsum, mut wi, mut wj) = (0.0, 0.0, 0.0);
    while let Some(idx) = queue.pop_front() {
        let (i, j) = (idx / ny, idx % ny);
        let w = smooth[idx];
        wsum += w;
        wi += w * i as f64;
        wj += w * j as f64;
        for a in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
            for b in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                let n = a * ny + b;
                if !in_region[n] && smooth[n] > half {
                    in_region[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }

    let background = median(smooth.iter().zip(&in_region).filter(|(_, &r)| !r).map(|(&v, _)| v).collect());
    let origin = g.origin();
    let pitch = g.pitch();
    let xy = (origin.x + pitch.x * wi / wsum, origin.y + pitch.y * wj / wsum);
    Ok(BevLocalization { xy, peak_intensity: peak, confidence: peak / (peak + background) })
}

/// Pools the default RoI around `loc` into a fixed-length vector.
///
/// Layout, for a crop of depth `nz` and all frames pooled together:
/// `[0, nz)` fraction of energy in each z-slab; then the weighted mean of
/// x - x̂, y - ŷ and z; then the weighted variances of x, y and z; then
/// `ln(1 + E)` where `E` is the total crop energy. An empty crop yields
/// all zeros.
pub fn extract_roi_features(s: &FrameStack, loc: &BevLocalization) -> Result<Vec<f64>, LocalizeError> {
    let crop = crop_roi(s, loc.xy, DEFAULT_ROI)?;
    let g = crop.geometry();
    let [nx, ny, nz] = g.dims();
    let mut slabs = vec![0.0; nz];
    let mut m1 = [0.0; 3];
    let mut m2 = [0.0; 3];
    let mut total = 0.0;
    for frame in crop.frames() {
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let v = frame.get(i, j, k) as f64;
                    if v == 0.0 {
                        continue;
                    }
                    let c = g.voxel_center([i as i64, j as i64, k as i64]);
                    let p = [c.x - loc.xy.0, c.y - loc.xy.1, c.z];
                    slabs[k] += v;
                    total += v;
                    for a in 0..3 {
                        m1[a] += v * p[a];
                        m2[a] += v * p[a] * p[a];
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; feature_len(nz)];
    if total > 0.0 {
        for k in 0..nz {
            out[k] = slabs[k] / total;
        }
        for a in 0..3 {
            let mean = m1[a] / total;
            out[nz + a] = mean;
            out[nz + 3 + a] = (m2[a] / total - mean * mean).max(0.0);
        }
        out[nz + 6] = total.ln_1p();
    }
    Ok(out)
}

/// Affine map from standardized features to the flat parameter vector.
///
/// The τ entries are residuals: x and y are added to the localization and z
/// to `root_height`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressor {
    /// Row-major `PARAM_LEN × n_features`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub root_height: f64,
}

impl LinearRegressor {
    pub fn zeros(n_features: usize) -> Self {
        LinearRegressor {
            weights: vec![0.0; PARAM_LEN * n_features],
            bias: vec![0.0; PARAM_LEN],
            feature_mean: vec![0.0; n_features],
            feature_scale: vec![1.0; n_features],
            root_height: DEFAULT_ROOT_HEIGHT,
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn validate(&self) -> Result<(), LocalizeError> {
        let f = self.n_features();
        if self.weights.len() != PARAM_LEN * f || self.bias.len() != PARAM_LEN || self.feature_scale.len() != f {
            return Err(LocalizeError::InvalidArgument("inconsistent regressor dimensions".into()));
        }
        let all = self.weights.iter().chain(&self.bias).chain(&self.feature_mean).chain(&self.feature_scale);
        if !all.chain([&self.root_height]).all(|v| v.is_finite()) || self.feature_scale.iter().any(|&s| s <= 0.0) {
            return Err(LocalizeError::InvalidArgument("regressor holds non-finite or non-positive scale values".into()));
        }
        Ok(())
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features.iter().zip(&self.feature_mean).zip(&self.feature_scale).map(|((f, m), s)| (f - m) / s).collect()
    }

    fn raw_output(&self, z: &[f64]) -> [f64; PARAM_LEN] {
        let f = z.len();
        let mut y = [0.0; PARAM_LEN];
        for (r, out) in y.iter_mut().enumerate() {
            let row = &self.weights[r * f..(r + 1) * f];
            *out = self.bias[r] + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
        }
        y
    }

    fn absolute(&self, mut y: [f64; PARAM_LEN], loc: &BevLocalization) -> [f64; PARAM_LEN] {
        y[TAU_OFFSET] += loc.xy.0;
        y[TAU_OFFSET + 1] += loc.xy.1;
        y[TAU_OFFSET + 2] += self.root_height;
        y
    }

    /// Parameters for a precomputed localization and feature vector.
    pub fn predict_features(&self, loc: &BevLocalization, features: &[f64]) -> Result<BodyParams, LocalizeError> {
        if features.len() != self.n_features() {
            return Err(LocalizeError::InvalidArgument(format!(
                "expected {} features, got {}",
                self.n_features(),
                features.len()
            )));
        }
        let mut y = self.absolute(self.raw_output(&self.standardize(features)), loc);
        y[G_OFFSET] = y[G_OFFSET].clamp(0.0, 1.0);
        Ok(BodyParams::from_vector(&y)?.canonicalized())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), LocalizeError> {
        self.validate()?;
        let mut buf = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 4 * (self.weights.len() + PARAM_LEN + 2 * self.n_features()));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&(self.n_features() as u32).to_le_bytes());
        buf.extend_from_slice(&(PARAM_LEN as u32).to_le_bytes());
        buf.extend_from_slice(&self.root_height.to_le_bytes());
        for v in self.feature_mean.iter().chain(&self.feature_scale).chain(&self.weights).chain(&self.bias) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, LocalizeError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < CHECKPOINT_HEADER_LEN || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(LocalizeError::Malformed("missing M4LR header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(LocalizeError::Malformed(format!("unsupported version {version}")));
        }
        let f = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let outputs = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if outputs != PARAM_LEN {
            return Err(LocalizeError::Malformed(format!("expected {PARAM_LEN} outputs, got {outputs}")));
        }
        let root_height = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let count = f
            .checked_mul(PARAM_LEN + 2)
            .and_then(|n| n.checked_add(PARAM_LEN))
            .ok_or_else(|| LocalizeError::Malformed("feature count overflows".into()))?;
        if bytes.len() != CHECKPOINT_HEADER_LEN + 4 * count {
            return Err(LocalizeError::Malformed(format!(
                "expected {} bytes, got {}",
                CHECKPOINT_HEADER_LEN + 4 * count,
                bytes.len()
            )));
        }
        let mut values = bytes[CHECKPOINT_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
        let model = LinearRegressor {
            feature_mean: take(f),
            feature_scale: take(f),
            weights: take(PARAM_LEN * f),
            bias: take(PARAM_LEN),
            root_height,
        };
        model.validate().map_err(|e| LocalizeError::Malformed(e.to_string()))?;
        Ok(model)
    }
}

/// Localizes, pools and regresses the body parameters for one stack.
pub fn predict(s: &FrameStack, model: &LinearRegressor) -> Result<BodyParams, LocalizeError> {
    let loc = localize_bev(s)?;
    let features = extract_roi_features(s, &loc)?;
    model.predict_features(&loc, &features)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    /// Ratio of the last step's learning rate to `lr`; the rate decays
    /// geometrically in between. `1.0` keeps it constant.
    pub final_lr_ratio: f64,
    pub root_height: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { steps: 2000, lr: 0.05, final_lr_ratio: 1e-4, root_height: DEFAULT_ROOT_HEIGHT }
    }
}

/// A training example reduced to what the regressor sees.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub loc: BevLocalization,
    pub features: Vec<f64>,
    pub gt: BodyParams,
}

pub fn prepare_sample(s: &FrameStack, gt: &BodyParams) -> Result<PreparedSample, LocalizeError> {
    let loc = localize_bev(s)?;
    let features = extract_roi_features(s, &loc)?;
    Ok(PreparedSample { loc, features, gt: *gt })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: LinearRegressor,
    /// Mean total loss before each step, followed by the final loss.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent on the mean total loss over `data`.
pub fn fit_regressor(
    data: &[(FrameStack, BodyParams)],
    w: &LossWeights,
    cfg: &FitConfig,
) -> Result<FitResult, LocalizeError> {
    let prepared = data.iter().map(|(s, gt)| prepare_sample(s, gt)).collect::<Result<Vec<_>, _>>()?;
    fit_prepared(&prepared, w, cfg)
}

pub fn fit_prepared(data: &[PreparedSample], w: &LossWeights, cfg: &FitConfig) -> Result<FitResult, LocalizeError> {
    if data.is_empty() {
        return Err(LocalizeError::InvalidArgument("training set is empty".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || !(cfg.final_lr_ratio > 0.0 && cfg.final_lr_ratio.is_finite()) || !cfg.root_height.is_finite() {
        return Err(LocalizeError::InvalidArgument("learning rate, decay ratio and root height must be finite, lr non-negative, ratio positive".into()));
    }
    w.validate()?;
    let f = data[0].features.len();
    if data.iter().any(|d| d.features.len() != f) {
        return Err(LocalizeError::InvalidArgument("samples disagree on feature length".into()));
    }

    let n = data.len() as f64;
    let mut model = LinearRegressor::zeros(f);
    model.root_height = cfg.root_height;
    for k in 0..f {
        let mean = data.iter().map(|d| d.features[k]).sum::<f64>() / n;
        let var = data.iter().map(|d| (d.features[k] - mean).powi(2)).sum::<f64>() / n;
        model.feature_mean[k] = mean;
        model.feature_scale[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    model.bias[G_OFFSET] = 0.5;
    let inputs: Vec<Vec<f64>> = data.iter().map(|d| model.standardize(&d.features)).collect();

    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut grad_w = vec![0.0; model.weights.len()];
    for step in 0..=cfg.steps {
        grad_w.iter_mut().for_each(|v| *v = 0.0);
        let mut grad_b = [0.0; PARAM_LEN];
        let mut loss = 0.0;
        for (d, z) in data.iter().zip(&inputs) {
            let y = model.absolute(model.raw_output(z), &d.loc);
            let pred = BodyParams::from_vector(&y)?;
            let xy = (pred.tau.x, pred.tau.y);
            loss += total_loss(xy, &pred, &d.gt, w).value;
            let g = sample_gradient(xy, &pred, &d.gt, w);
            for r in 0..PARAM_LEN {
                if g[r] == 0.0 {
                    continue;
                }
                grad_b[r] += g[r];
                for (gw, x) in grad_w[r * f..(r + 1) * f].iter_mut().zip(z) {
                    *gw += g[r] * x;
                }
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(LocalizeError::TrainingDiverged { step });
        }
        trace.push(loss);
        if step == cfg.steps {
            break;
        }
        let lr = cfg.lr * cfg.final_lr_ratio.powf(step as f64 / cfg.steps.max(2).saturating_sub(1) as f64);
        for (p, g) in model.weights.iter_mut().zip(&grad_w) {
            *p -= lr * g / n;
        }
        for (p, g) in model.bias.iter_mut().zip(&grad_b) {
            *p -= lr * g / n;
        }
    }
    Ok(FitResult { model, loss_trace: trace })
}

/// Gradient of the total loss in the absolute parameter vector, with the
/// BEV term acting on the predicted τ x and y.
fn sample_gradient(xy: (f64, f64), pred: &BodyParams, gt: &BodyParams, w: &LossWeights) -> [f64; PARAM_LEN] {
    let mut g = mesh_loss(pred, gt, w).gradient;
    for v in g.iter_mut() {
        *v *= w.lambda_mesh;
    }
    let (_, bev) = crate::body::bev_loss(xy, &gt.tau);
    g[TAU_OFFSET] += w.lambda_2d * bev[0];
    g[TAU_OFFSET + 1] += w.lambda_2d * bev[1];
    g
}

/// Ground-plane root error of the no-learning baseline, which places τ at
/// the localization.
pub fn centroid_baseline_error(loc: &BevLocalization, gt: &BodyParams) -> f64 {
    let d = Vec3::new(loc.xy.0 - gt.tau.x, loc.xy.1 - gt.tau.y, 0.0);
    d.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_sequence, render_frame, ScenarioConfig};
    use crate::tensor::{GridGeometry, RadarTensor};
    use crate::body::BodyModel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> GridGeometry {
        GridGeometry::new([40, 40, 8], Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.05, 0.05, 0.08)).unwrap()
    }

    fn blob_stack(g: GridGeometry, blobs: &[([f64; 2], f64)], frames: usize) -> FrameStack {
        let t = RadarTensor::from_fn(g, |i, j, k| {
            let c = g.voxel_center([i as i64, j as i64, k as i64]);
            blobs
                .iter()
                .map(|(p, a)| {
                    let d2 = (c.x - p[0]).powi(2) + (c.y - p[1]).powi(2);
                    a * (-d2 / (2.0 * 0.08f64.powi(2))).exp()
                })
                .sum::<f64>() as f32
        })
        .unwrap();
        FrameStack::new(vec![t; frames]).unwrap()
    }

    fn sample_stack(c: &ScenarioConfig, g: &GridGeometry) -> (FrameStack, BodyParams) {
        let model = BodyModel::standard();
        let gt = crate::sim::params_at(c, 0.0);
        let t = render_frame(g, &model, &gt, c, 0).unwrap();
        (FrameStack::new(vec![t; 4]).unwrap(), gt)
    }

    #[test]
    fn empty_stack_has_no_target() {
        let g = small_grid();
        let s = FrameStack::new(vec![RadarTensor::zeros(g)]).unwrap();
        assert!(matches!(localize_bev(&s), Err(LocalizeError::NoTarget)));
    }

    #[test]
    fn single_blob_is_found() {
        let g = small_grid();
        let s = blob_stack(g, &[([1.0, 1.2], 1.0)], 2);
        let loc = localize_bev(&s).unwrap();
        assert!((loc.xy.0 - 1.0).abs() < 0.01 && (loc.xy.1 - 1.2).abs() < 0.01, "{loc:?}");
        assert!(loc.confidence > 0.5 && loc.confidence <= 1.0);
    }

    #[test]
    fn simulated_subject_at_known_position() {
        let g = GridGeometry::radar_default();
        let mut c = ScenarioConfig::default();
        c.position = [1.0, 2.0];
        c.noise_floor = 0.0;
        let (s, _) = sample_stack(&c, &g);
        let loc = localize_bev(&s).unwrap();
        assert!((loc.xy.0 - 1.0).hypot(loc.xy.1 - 2.0) <= 0.05, "{loc:?}");
    }

    #[test]
    fn stronger_blob_wins() {
        let g = small_grid();
        let s = blob_stack(g, &[([0.5, 0.5], 1.0), ([1.5, 1.4], 10.0)], 1);
        let loc = localize_bev(&s).unwrap();
        assert!((loc.xy.0 - 1.5).abs() < 0.01 && (loc.xy.1 - 1.4).abs() < 0.01, "{loc:?}");
    }

    fn random_blob(g: GridGeometry, shift: (usize, usize), seed: u64) -> FrameStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0f32; g.len()];
        for _ in 0..30 {
            let i = 12 + rng.gen_range(0..6) + shift.0;
            let j = 12 + rng.gen_range(0..6) + shift.1;
            let k = rng.gen_range(0..g.dims()[2]);
            values[g.linear_index(i, j, k)] += rng.gen_range(0.1f32..1.0);
        }
        FrameStack::new(vec![RadarTensor::new(g, values).unwrap()]).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn translation_equivariance(seed in any::<u64>(), dx in 0usize..8, dy in 0usize..8) {
            let g = small_grid();
            let a = localize_bev(&random_blob(g, (0, 0), seed)).unwrap();
            let b = localize_bev(&random_blob(g, (dx, dy), seed)).unwrap();
            prop_assert!((b.xy.0 - a.xy.0 - dx as f64 * g.pitch().x).abs() < 1e-9);
            prop_assert!((b.xy.1 - a.xy.1 - dy as f64 * g.pitch().y).abs() < 1e-9);
        }

        #[test]
        fn scale_invariance(seed in any::<u64>(), e in -6i32..6) {
            let g = small_grid();
            let s = random_blob(g, (3, 3), seed);
            let k = 2f32.powi(e);
            let scaled = FrameStack::new(
                s.frames().iter().map(|f| RadarTensor::new(g, f.values().iter().map(|v| v * k).collect()).unwrap()).collect(),
            ).unwrap();
            let a = localize_bev(&s).unwrap();
            let b = localize_bev(&scaled).unwrap();
            prop_assert!((a.xy.0 - b.xy.0).abs() < 1e-12 && (a.xy.1 - b.xy.1).abs() < 1e-12);
            prop_assert!((a.confidence - b.confidence).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_crop_gives_zero_features() {
        let g = GridGeometry::radar_default();
        let s = FrameStack::new(vec![RadarTensor::zeros(g)]).unwrap();
        let loc = BevLocalization { xy: (0.0, 3.0), peak_intensity: 1.0, confidence: 1.0 };
        let f = extract_roi_features(&s, &loc).unwrap();
        assert_eq!(f.len(), DEFAULT_FEATURE_LEN);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_crop_moments_are_geometric_centres() {
        let g = GridGeometry::radar_default();
        let s = FrameStack::new(vec![RadarTensor::from_fn(g, |_, _, _| 1.0).unwrap()]).unwrap();
        let loc = BevLocalization { xy: (0.0, 3.0), peak_intensity: 1.0, confidence: 1.0 };
        let f = extract_roi_features(&s, &loc).unwrap();
        let [rx, ry, rz] = DEFAULT_ROI;
        let nz = rz;
        let crop = crop_roi(&s, loc.xy, DEFAULT_ROI).unwrap();
        let (o, p) = (crop.geometry().origin(), crop.geometry().pitch());
        let cx = o.x + p.x * (rx - 1) as f64 / 2.0;
        let cy = o.y + p.y * (ry - 1) as f64 / 2.0;
        let cz = o.z + p.z * (rz - 1) as f64 / 2.0;
        assert!((f[nz] - (cx - 0.0)).abs() < 1e-9);
        assert!((f[nz + 1] - (cy - 3.0)).abs() < 1e-9);
        assert!((f[nz + 2] - cz).abs() < 1e-9);
        for k in 0..nz {
            assert!((f[k] - 1.0 / nz as f64).abs() < 1e-12);
        }
        let var_x = p.x * p.x * ((rx * rx - 1) as f64) / 12.0;
        assert!((f[nz + 3] - var_x).abs() < 1e-9);
    }

    #[test]
    fn features_match_direct_summation() {
        let g = GridGeometry::radar_default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<_> = (0..2)
            .map(|_| {
                RadarTensor::from_fn(g, |_, _, _| if rng.gen_bool(0.05) { rng.gen_range(0.0f32..2.0) } else { 0.0 }).unwrap()
            })
            .collect();
        let s = FrameStack::new(frames).unwrap();
        let loc = BevLocalization { xy: (0.4, 2.1), peak_intensity: 1.0, confidence: 1.0 };
        let f = extract_roi_features(&s, &loc).unwrap();

        let c = g.nearest_voxel(&Vec3::new(0.4, 2.1, 0.0));
        let (mut e, mut sx, mut sxx, mut slab0) = (0.0, 0.0, 0.0, 0.0);
        for frame in s.frames() {
            for i in c[0] - 12..c[0] + 12 {
                for j in c[1] - 12..c[1] + 12 {
                    for k in 0..31 {
                        let v = frame.get(i as usize, j as usize, k) as f64;
                        let x = g.voxel_center([i, j, k as i64]).x - 0.4;
                        e += v;
                        sx += v * x;
                        sxx += v * x * x;
                        if k == 0 {
                            slab0 += v;
                        }
                    }
                }
            }
        }
        assert!((f[0] - slab0 / e).abs() < 1e-9);
        assert!((f[31] - sx / e).abs() < 1e-9);
        assert!((f[34] - (sxx / e - (sx / e).powi(2))).abs() < 1e-9);
        assert!((f[37] - e.ln_1p()).abs() < 1e-9);
    }

    #[test]
    fn zero_model_places_root_at_localization() {
        let m = LinearRegressor::zeros(DEFAULT_FEATURE_LEN);
        let loc = BevLocalization { xy: (0.3, 2.7), peak_intensity: 1.0, confidence: 1.0 };
        let p = m.predict_features(&loc, &vec![0.7; DEFAULT_FEATURE_LEN]).unwrap();
        assert_eq!(p.tau, Vec3::new(0.3, 2.7, DEFAULT_ROOT_HEIGHT));
        assert_eq!(p.g, 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let g = GridGeometry::radar_default();
        let (s, gt) = sample_stack(&ScenarioConfig::default(), &g);
        let cfg = FitConfig { steps: 20, lr: 0.0, ..Default::default() };
        let r = fit_regressor(&[(s, gt)], &LossWeights::default(), &cfg).unwrap();
        assert!(r.model.weights.iter().all(|&v| v == 0.0));
        assert!(r.loss_trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn single_sample_overfits() {
        let g = GridGeometry::radar_default();
        let (s, gt) = sample_stack(&ScenarioConfig::default(), &g);
        let r = fit_regressor(&[(s.clone(), gt)], &LossWeights::default(), &FitConfig::default()).unwrap();
        let first = r.loss_trace[0];
        let last = *r.loss_trace.last().unwrap();
        assert!(last < 0.01 * first, "{first} -> {last}");
        let p = predict(&s, &r.model).unwrap();
        assert!((p.tau - gt.tau).norm() < 0.01);
        assert!((p.beta[0] - gt.beta[0]).abs() < 0.01);
    }

    #[test]
    fn beta_only_trace_is_monotone() {
        let g = GridGeometry::radar_default();
        let mut data = Vec::new();
        for seed in 0..6 {
            let mut c = ScenarioConfig::for_action(1, 1 + seed as u16, seed).unwrap();
            c.duration_s = 0.25;
            let seq = generate_sequence(&c, &g).unwrap();
            data.push((FrameStack::new(seq.frames[..1].to_vec()).unwrap(), seq.gt[0]));
        }
        let w = LossWeights {
            lambda_2d: 0.0,
            lambda_alpha: 0.0,
            lambda_theta: 0.0,
            lambda_tau: 0.0,
            lambda_g: 0.0,
            ..LossWeights::default()
        };
        let cfg = FitConfig { steps: 200, lr: 0.01, final_lr_ratio: 1.0, ..Default::default() };
        let r = fit_regressor(&data, &w, &cfg).unwrap();
        assert!(r.loss_trace.windows(2).all(|p| p[1] <= p[0] + 1e-15));
        assert!(r.loss_trace.last().unwrap() < &r.loss_trace[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let g = GridGeometry::radar_default();
        let mut c = ScenarioConfig::default();
        c.beta[0] = 1.0;
        let (s, gt) = sample_stack(&c, &g);
        let w = LossWeights { lambda_alpha: 0.0, lambda_theta: 0.0, lambda_tau: 0.0, lambda_g: 0.0, lambda_2d: 0.0, ..LossWeights::default() };
        let cfg = FitConfig { steps: 50, lr: 1e300, final_lr_ratio: 1.0, ..Default::default() };
        assert!(matches!(fit_regressor(&[(s, gt)], &w, &cfg), Err(LocalizeError::TrainingDiverged { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = LinearRegressor::zeros(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in m.weights.iter_mut().chain(m.bias.iter_mut()) {
            *v = rng.gen_range(-1.0f32..1.0) as f64;
        }
        m.feature_scale = vec![0.5, 1.0, 2.0, 4.0, 0.25];
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), CHECKPOINT_HEADER_LEN + 4 * (5 * (PARAM_LEN + 2) + PARAM_LEN));
        assert_eq!(LinearRegressor::read_checkpoint(&buf[..]).unwrap(), m);
        buf.truncate(buf.len() - 1);
        assert!(matches!(LinearRegressor::read_checkpoint(&buf[..]), Err(LocalizeError::Malformed(_))));
    }
}
