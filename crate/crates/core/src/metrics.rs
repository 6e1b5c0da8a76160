//! World-frame error metrics, protocol and split definitions, and the
//! aggregation harness that turns evaluation records into table rows.
//!
//! Distances are in millimetres and angles in degrees. Nothing is aligned
//! before measuring: no root centring, no Procrustes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{rotation_distance, BodyModel, BodyParams, NUM_JOINTS};
use crate::geometry::Vec3;
use crate::sim::{Family, P1_ACTIONS, P2_ACTIONS, P3_ACTIONS};
use crate::store::SampleKey;

pub const DEFAULT_RATIOS: [f64; 3] = [0.75, 0.05, 0.20];
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.20;
pub const CSV_HEADER: [&str; 9] =
    ["protocol", "split", "count", "n_vertices", "mve_mm", "mje_mm", "mre_deg", "te_mm", "status"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn mean_distance_mm(pred: &[Vec3], gt: &[Vec3]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::InvalidArgument(format!("{} predicted points against {} ground truth", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(MetricsError::InvalidArgument("no points to compare".into()));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum();
    Ok(1000.0 * sum / pred.len() as f64)
}

/// Mean per-vertex distance.
pub fn mve(pred_vertices: &[Vec3], gt_vertices: &[Vec3]) -> Result<f64, MetricsError> {
    mean_distance_mm(pred_vertices, gt_vertices)
}

/// Mean per-joint distance over the 22 body joints.
pub fn mje(pred_joints: &[Vec3], gt_joints: &[Vec3]) -> Result<f64, MetricsError> {
    if pred_joints.len() != NUM_JOINTS || gt_joints.len() != NUM_JOINTS {
        return Err(MetricsError::InvalidArgument(format!(
            "expected {NUM_JOINTS} joints, got {} and {}",
            pred_joints.len(),
            gt_joints.len()
        )));
    }
    mean_distance_mm(pred_joints, gt_joints)
}

/// Mean geodesic error of the joint rotations, plus the global orientation
/// when `include_alpha` is set.
pub fn mre(pred: &BodyParams, gt: &BodyParams, include_alpha: bool) -> f64 {
    let mut sum: f64 = pred.theta.iter().zip(&gt.theta).map(|(a, b)| rotation_distance(a, b)).sum();
    let mut n = NUM_JOINTS;
    if include_alpha {
        sum += rotation_distance(&pred.alpha, &gt.alpha);
        n += 1;
    }
    (sum / n as f64).to_degrees()
}

/// Root translation error.
pub fn te(pred_tau: &Vec3, gt_tau: &Vec3) -> f64 {
    1000.0 * (pred_tau - gt_tau).norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub key: SampleKey,
    pub pred: BodyParams,
    pub gt: BodyParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordMetrics {
    pub mve: f64,
    pub mje: f64,
    pub mre: f64,
    pub te: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Count the global orientation as a 23rd rotation in MRE.
    pub mre_include_alpha: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { mre_include_alpha: true }
    }
}

pub fn record_metrics(model: &BodyModel, r: &EvalRecord, opts: &MetricOptions) -> Result<RecordMetrics, MetricsError> {
    let pv = model.forward_vertices(&r.pred);
    let gv = model.forward_vertices(&r.gt);
    Ok(RecordMetrics {
        mve: mve(&pv, &gv)?,
        mje: mje(&model.forward_joints(&r.pred), &model.forward_joints(&r.gt))?,
        mre: mre(&r.pred, &r.gt, opts.mre_include_alpha),
        te: te(&r.pred.tau, &r.gt.tau),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtocolId {
    P1,
    P2,
    P3,
    All,
}

impl ProtocolId {
    pub const ALL_IDS: [ProtocolId; 4] = [ProtocolId::P1, ProtocolId::P2, ProtocolId::P3, ProtocolId::All];

    pub fn contains(&self, action: u16) -> bool {
        match self {
            ProtocolId::P1 => P1_ACTIONS.contains(&action),
            ProtocolId::P2 => P2_ACTIONS.contains(&action),
            ProtocolId::P3 => P3_ACTIONS.contains(&action),
            ProtocolId::All => Family::of_action(action).is_some(),
        }
    }

    pub fn actions(&self) -> Vec<u16> {
        (1..=*P3_ACTIONS.end()).filter(|&a| self.contains(a)).collect()
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolId::P1 => "P1",
            ProtocolId::P2 => "P2",
            ProtocolId::P3 => "P3",
            ProtocolId::All => "ALL",
        })
    }
}

impl std::str::FromStr for ProtocolId {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(ProtocolId::P1),
            "P2" => Ok(ProtocolId::P2),
            "P3" => Ok(ProtocolId::P3),
            "ALL" => Ok(ProtocolId::All),
            _ => Err(MetricsError::InvalidArgument(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Random,
    CrossSubject,
    CrossAction,
}

impl SplitKind {
    pub fn label(&self) -> &'static str {
        match self {
            SplitKind::Random => "S1",
            SplitKind::CrossSubject => "S2",
            SplitKind::CrossAction => "S3",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "random" => Ok(SplitKind::Random),
            "s2" | "cross_subject" | "cross-subject" => Ok(SplitKind::CrossSubject),
            "s3" | "cross_action" | "cross-action" => Ok(SplitKind::CrossAction),
            _ => Err(MetricsError::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub kind: SplitKind,
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    /// Subjects (cross-subject) or action classes (cross-action) reserved
    /// for testing. Empty means draw `holdout_fraction` of them by seed.
    pub held_out: Vec<u16>,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            kind: SplitKind::Random,
            ratios: DEFAULT_RATIOS,
            held_out: Vec::new(),
            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn new(kind: SplitKind, seed: u64) -> Self {
        SplitSpec { kind, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MetricsError::InvalidArgument(format!("split ratios {:?} must be non-negative and sum to 1", self.ratios)));
        }
        if !(0.0..=1.0).contains(&self.holdout_fraction) {
            return Err(MetricsError::InvalidArgument(format!("holdout fraction {} outside [0, 1]", self.holdout_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: BTreeSet<SampleKey>,
    pub val: BTreeSet<SampleKey>,
    pub test: BTreeSet<SampleKey>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parts(&self) -> [(&'static str, &BTreeSet<SampleKey>); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

type Clip = (u16, u16);

fn round_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

/// Splits shuffled clips into train/val/test by `ratios`, rounding the
/// train and val counts and giving the remainder to test.
fn divide(clips: &[Clip], ratios: [f64; 3]) -> [Vec<Clip>; 3] {
    let n = clips.len();
    let n_train = round_count(n, ratios[0]);
    let n_val = round_count(n, ratios[1]).min(n - n_train);
    [clips[..n_train].to_vec(), clips[n_train..n_train + n_val].to_vec(), clips[n_train + n_val..].to_vec()]
}

fn pick_held_out(ids: &BTreeSet<u16>, spec: &SplitSpec, rng: &mut ChaCha8Rng) -> BTreeSet<u16> {
    if !spec.held_out.is_empty() {
        return spec.held_out.iter().copied().collect();
    }
    let mut all: Vec<u16> = ids.iter().copied().collect();
    all.shuffle(rng);
    all.into_iter().take(round_count(ids.len(), spec.holdout_fraction)).collect()
}

/// Deterministic train/val/test partition of `catalogue`.
///
/// The unit of assignment is the clip (subject, action); every frame of a
/// clip lands in the same part. Clips are sorted before a seeded shuffle so
/// the result does not depend on input order.
///
/// * Random: clips are divided by `ratios`.
/// * Cross-subject: every clip of a held-out subject is test; the other clips
///   are divided between train and val in the ratio of the first two
///   fractions.
/// * Cross-action: within each protocol group, the held-out classes (by
///   default `holdout_fraction` of the group's classes present, rounded) are
///   test; the rest is divided as above.
pub fn make_split(catalogue: &[SampleKey], spec: &SplitSpec) -> Result<Split, MetricsError> {
    spec.validate()?;
    if catalogue.is_empty() {
        return Err(MetricsError::InvalidArgument("catalogue is empty".into()));
    }
    let mut clips_of: BTreeMap<Clip, Vec<SampleKey>> = BTreeMap::new();
    for k in catalogue {
        clips_of.entry((k.subject_id, k.action_id)).or_default().push(*k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rest_ratios = {
        let tv = spec.ratios[0] + spec.ratios[1];
        if tv > 0.0 {
            [spec.ratios[0] / tv, spec.ratios[1] / tv, 0.0]
        } else {
            [1.0, 0.0, 0.0]
        }
    };

    let parts: [Vec<Clip>; 3] = match spec.kind {
        SplitKind::Random => {
            let mut clips: Vec<Clip> = clips_of.keys().copied().collect();
            clips.shuffle(&mut rng);
            divide(&clips, spec.ratios)
        }
        SplitKind::CrossSubject => {
            let subjects: BTreeSet<u16> = clips_of.keys().map(|c| c.0).collect();
            let held = pick_held_out(&subjects, spec, &mut rng);
            if held.is_empty() || subjects.iter().all(|s| held.contains(s)) {
                return Err(MetricsError::InfeasibleSplit(format!(
                    "held-out subjects {held:?} leave no test or no training subject among {subjects:?}"
                )));
            }
            let (test, mut rest): (Vec<Clip>, Vec<Clip>) = clips_of.keys().partition(|c| held.contains(&c.0));
            rest.shuffle(&mut rng);
            let [train, val, _] = divide(&rest, rest_ratios);
            [train, val, test]
        }
        SplitKind::CrossAction => {
            let actions: BTreeSet<u16> = clips_of.keys().map(|c| c.1).collect();
            if let Some(a) = actions.iter().find(|&&a| Family::of_action(a).is_none()) {
                return Err(MetricsError::InvalidArgument(format!("action {a} belongs to no protocol group")));
            }
            let held: BTreeSet<u16> = if spec.held_out.is_empty() {
                let mut held = BTreeSet::new();
                for p in [ProtocolId::P1, ProtocolId::P2, ProtocolId::P3] {
                    let group: BTreeSet<u16> = actions.iter().copied().filter(|&a| p.contains(a)).collect();
                    held.extend(pick_held_out(&group, spec, &mut rng));
                }
                held
            } else {
                spec.held_out.iter().copied().collect()
            };
            if held.is_empty() || actions.iter().all(|a| held.contains(a)) {
                return Err(MetricsError::InfeasibleSplit(format!(
                    "held-out classes {held:?} leave no test or no training class among {} classes",
                    actions.len()
                )));
            }
            let (test, mut rest): (Vec<Clip>, Vec<Clip>) = clips_of.keys().partition(|c| held.contains(&c.1));
            rest.shuffle(&mut rng);
            let [train, val, _] = divide(&rest, rest_ratios);
            [train, val, test]
        }
    };

    let collect = |clips: &Vec<Clip>| clips.iter().flat_map(|c| clips_of[c].iter().copied()).collect::<BTreeSet<_>>();
    Ok(Split { train: collect(&parts[0]), val: collect(&parts[1]), test: collect(&parts[2]) })
}

/// One key per line in display form, sorted.
pub fn write_manifest<W: Write>(mut w: W, keys: &BTreeSet<SampleKey>) -> Result<(), MetricsError> {
    for k in keys {
        writeln!(w, "{k}")?;
    }
    Ok(())
}

/// Reads a manifest; blank lines and `#` comments are skipped.
pub fn read_manifest<R: BufRead>(r: R) -> Result<BTreeSet<SampleKey>, MetricsError> {
    let mut keys = BTreeSet::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        keys.insert(line.parse().map_err(|e: crate::store::StoreError| MetricsError::InvalidArgument(e.to_string()))?);
    }
    Ok(keys)
}

/// One benchmark row; metric fields are `None` when no record matched.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub protocol: ProtocolId,
    pub split: String,
    pub count: usize,
    pub n_vertices: usize,
    pub metrics: Option<RecordMetrics>,
}

/// Averages per-record metrics over the records whose action belongs to
/// `protocol`. Every frame counts once; sums run in key order.
pub fn aggregate(
    model: &BodyModel,
    records: &[EvalRecord],
    protocol: ProtocolId,
    split: &str,
    opts: &MetricOptions,
) -> Result<TableRow, MetricsError> {
    let mut chosen: Vec<&EvalRecord> = records.iter().filter(|r| protocol.contains(r.key.action_id)).collect();
    chosen.sort_by_key(|r| r.key);
    let per: Vec<RecordMetrics> =
        chosen.par_iter().map(|r| record_metrics(model, r, opts)).collect::<Result<_, _>>()?;
    Ok(summarize(protocol, split, model.vertex_count(), &per))
}

pub fn summarize(protocol: ProtocolId, split: &str, n_vertices: usize, per: &[RecordMetrics]) -> TableRow {
    let metrics = if per.is_empty() {
        None
    } else {
        let n = per.len() as f64;
        let mut m = RecordMetrics { mve: 0.0, mje: 0.0, mre: 0.0, te: 0.0 };
        for r in per {
            m.mve += r.mve;
            m.mje += r.mje;
            m.mre += r.mre;
            m.te += r.te;
        }
        Some(RecordMetrics { mve: m.mve / n, mje: m.mje / n, mre: m.mre / n, te: m.te / n })
    };
    TableRow { protocol, split: split.to_string(), count: per.len(), n_vertices, metrics }
}

/// Writes rows under [`CSV_HEADER`]. Empty rows carry blank metric cells and
/// the status `empty`.
pub fn write_csv<W: Write>(w: W, rows: &[TableRow]) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        let mut rec = vec![r.protocol.to_string(), r.split.clone(), r.count.to_string(), r.n_vertices.to_string()];
        match &r.metrics {
            Some(m) => {
                rec.extend([m.mve, m.mje, m.mre, m.te].iter().map(|v| format!("{v:.6}")));
                rec.push("ok".into());
            }
            None => {
                rec.extend(std::iter::repeat(String::new()).take(4));
                rec.push("empty".into());
            }
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AxisAngle;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..2.0))).collect()
    }

    fn random_params(rng: &mut ChaCha8Rng) -> BodyParams {
        let mut p = BodyParams::default();
        let mut aa = || AxisAngle(Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)));
        p.alpha = aa();
        for t in p.theta.iter_mut() {
            *t = aa();
        }
        p.tau = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(0.5..5.0), rng.gen_range(0.5..1.0));
        for b in p.beta.iter_mut() {
            *b = rng.gen_range(-1.0..1.0);
        }
        p.g = rng.gen_range(0.0..1.0);
        p
    }

    #[test]
    fn distance_metrics_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_points(&mut rng, 100);
        assert_eq!(mve(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Vec3> = a.iter().map(|p| p + Vec3::new(0.01, 0.0, 0.0)).collect();
        assert!((mve(&shifted, &a).unwrap() - 10.0).abs() < 1e-9);
        assert!(mve(&a[..5], &a).is_err());
        assert!(mje(&a[..22], &a[..21]).is_err());
        assert!(mje(&a[..10], &a[..10]).is_err());
        assert!((te(&Vec3::new(0.03, 0.04, 0.0), &Vec3::zeros()) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn distance_metrics_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_points(&mut rng, 22);
            let b = random_points(&mut rng, 22);
            let mut sum = 0.0;
            for i in 0..22 {
                let d = [a[i].x - b[i].x, a[i].y - b[i].y, a[i].z - b[i].z];
                sum += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() * 1000.0;
            }
            assert!((mje(&a, &b).unwrap() - sum / 22.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mre_single_quarter_turn() {
        let gt = BodyParams::default();
        let mut pred = gt;
        pred.theta[4] = AxisAngle(Vec3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0));
        assert!((mre(&pred, &gt, true) - 90.0 / 23.0).abs() < 1e-9);
        assert!((mre(&pred, &gt, false) - 90.0 / 22.0).abs() < 1e-9);
        assert_eq!(mre(&gt, &gt, true), 0.0);
    }

    proptest! {
        #[test]
        fn mre_ignores_translation(seed in any::<u64>(), dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_params(&mut rng);
            let b = random_params(&mut rng);
            let mut a2 = a;
            a2.tau += Vec3::new(dx, dy, 0.3);
            let mut b2 = b;
            b2.tau -= Vec3::new(dy, 1.0, dx);
            prop_assert_eq!(mre(&a, &b, true), mre(&a2, &b2, true));
        }

        #[test]
        fn distances_are_translation_covariant(seed in any::<u64>(), ox in -3.0f64..3.0, oy in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(&mut rng, 22);
            let b = random_points(&mut rng, 22);
            let o = Vec3::new(ox, oy, 0.5);
            let a2: Vec<Vec3> = a.iter().map(|p| p + o).collect();
            let b2: Vec<Vec3> = b.iter().map(|p| p + o).collect();
            prop_assert!((mje(&a, &b).unwrap() - mje(&a2, &b2).unwrap()).abs() < 1e-9);
            prop_assert!((te(&(a[0] + o), &a[0]) - 1000.0 * o.norm()).abs() < 1e-9);
        }
    }

    fn catalogue(subjects: u16, actions: u16, frames: u32) -> Vec<SampleKey> {
        let mut keys = Vec::new();
        for s in 1..=subjects {
            for a in 1..=actions {
                for f in 0..frames {
                    keys.push(SampleKey::new(s, a, f));
                }
            }
        }
        keys
    }

    fn assert_partition(split: &Split, cat: &[SampleKey]) {
        let all: BTreeSet<SampleKey> = cat.iter().copied().collect();
        assert_eq!(split.len(), all.len());
        assert!(split.train.is_disjoint(&split.val) && split.train.is_disjoint(&split.test) && split.val.is_disjoint(&split.test));
        let union: BTreeSet<SampleKey> = split.train.union(&split.val).chain(split.test.iter()).copied().collect();
        assert_eq!(union, all);
    }

    #[test]
    fn random_split_is_reproducible() {
        let cat = catalogue(20, 50, 2);
        let a = make_split(&cat, &SplitSpec::new(SplitKind::Random, 5)).unwrap();
        let mut reversed = cat.clone();
        reversed.reverse();
        let b = make_split(&reversed, &SplitSpec::new(SplitKind::Random, 5)).unwrap();
        assert_eq!(a, b);
        assert_partition(&a, &cat);
        assert_eq!(a.train.len(), 2 * 750);
        assert_eq!(a.val.len(), 2 * 50);
        assert_eq!(a.test.len(), 2 * 200);
        assert_ne!(a, make_split(&cat, &SplitSpec::new(SplitKind::Random, 6)).unwrap());
    }

    #[test]
    fn cross_subject_excludes_training_subjects() {
        let cat = catalogue(20, 50, 1);
        let split = make_split(&cat, &SplitSpec::new(SplitKind::CrossSubject, 3)).unwrap();
        assert_partition(&split, &cat);
        let test_subjects: BTreeSet<u16> = split.test.iter().map(|k| k.subject_id).collect();
        assert_eq!(test_subjects.len(), 4);
        assert!(split.train.iter().chain(&split.val).all(|k| !test_subjects.contains(&k.subject_id)));

        let mut spec = SplitSpec::new(SplitKind::CrossSubject, 3);
        spec.held_out = (1..=20).collect();
        assert!(matches!(make_split(&cat, &spec), Err(MetricsError::InfeasibleSplit(_))));
    }

    #[test]
    fn cross_action_holds_out_a_fifth_of_each_group() {
        let cat = catalogue(3, 50, 1);
        let split = make_split(&cat, &SplitSpec::new(SplitKind::CrossAction, 9)).unwrap();
        assert_partition(&split, &cat);
        let test_actions: BTreeSet<u16> = split.test.iter().map(|k| k.action_id).collect();
        let count = |p: ProtocolId| test_actions.iter().filter(|&&a| p.contains(a)).count();
        assert_eq!((count(ProtocolId::P1), count(ProtocolId::P2), count(ProtocolId::P3)), (6, 1, 3));
        assert!(split.train.iter().chain(&split.val).all(|k| !test_actions.contains(&k.action_id)));
    }

    #[test]
    fn manifest_round_trip() {
        let cat = catalogue(2, 3, 4);
        let keys: BTreeSet<SampleKey> = cat.into_iter().collect();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &keys).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("S01/A01/F000000\n"));
        assert_eq!(read_manifest(&buf[..]).unwrap(), keys);
    }

    #[test]
    fn aggregation_rows_and_csv() {
        let model = BodyModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let records: Vec<EvalRecord> = [(1, 3), (1, 31), (2, 40), (2, 7), (3, 45)]
            .iter()
            .map(|&(s, a)| EvalRecord { key: SampleKey::new(s, a, 0), pred: random_params(&mut rng), gt: random_params(&mut rng) })
            .collect();
        let opts = MetricOptions::default();
        let rows: Vec<TableRow> =
            ProtocolId::ALL_IDS.iter().map(|&p| aggregate(&model, &records, p, "S1", &opts).unwrap()).collect();
        let all = rows[3].metrics.unwrap();
        let mut recomposed = 0.0;
        for r in &rows[..3] {
            recomposed += r.count as f64 * r.metrics.unwrap().mje;
        }
        assert_eq!(rows[3].count, 5);
        assert!((recomposed / 5.0 - all.mje).abs() < 1e-9);

        let single = aggregate(&model, &records[1..2], ProtocolId::P2, "S1", &opts).unwrap();
        assert_eq!(single.metrics.unwrap(), record_metrics(&model, &records[1], &opts).unwrap());

        let empty = aggregate(&model, &records[..1], ProtocolId::P3, "S1", &opts).unwrap();
        assert!(empty.metrics.is_none());
        let mut buf = Vec::new();
        write_csv(&mut buf, &[rows[0].clone(), empty]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert!(lines[1].starts_with("P1,S1,2,884,") && lines[1].ends_with(",ok"));
        assert_eq!(lines[2], "P3,S1,0,884,,,,,empty");
        assert!(!text.contains("NaN"));
    }
}
