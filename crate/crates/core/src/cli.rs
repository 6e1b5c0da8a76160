//! Command-line front end. Each subcommand maps to one pipeline stage.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 internal error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use thiserror::Error;

use crate::body::{deserialize_params, serialize_params, BodyModel, LossWeights};
use crate::calib::io::{PointFile, ResultFile};
use crate::calib::{solve_absolute_orientation, solve_pnp, CameraIntrinsics, Correspondence};
use crate::cfar::{cfar_detect, CfarConfig, RadarPointCloud};
use crate::codec;
use crate::geometry::Vec3;
use crate::localize::{fit_prepared, prepare_sample, FitConfig, LinearRegressor, PreparedSample};
use crate::metrics::{
    aggregate, make_split, write_csv, write_manifest, EvalRecord, MetricOptions, ProtocolId, SplitKind, SplitSpec,
};
use crate::sim::{generate_sequence, NoiseModel, ScenarioConfig};
use crate::store::{self, bench_access, export_directory, parse_raw_sample_path, raw_sample_path, Modality, SampleKey, Store};
use crate::sync::{align_to_trigger, detect_trigger, read_track_csv, SensorClock, DEFAULT_MOCAP_RATE, DEFAULT_SENSOR_RATE, DEFAULT_TRIGGER_THRESHOLD};
use crate::tensor::{stack_window, GridGeometry, DEFAULT_STACK};

pub const THREADS_ENV: &str = "M4PIPE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    crate::store::StoreError,
    crate::codec::CodecError,
    crate::cfar::CfarError,
    crate::calib::CalibError,
    crate::sync::SyncError,
    crate::body::BodyError,
    crate::sim::SimError,
    crate::localize::LocalizeError,
    crate::metrics::MetricsError,
    crate::tensor::TensorError,
    csv::Error
);

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "m4pipe", version, about = "Radar human-sensing dataset pipeline")]
pub struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic clips into a dataset directory.
    Simulate(SimulateArgs),
    /// Pack a per-file sample tree into one store per modality.
    Pack(PackArgs),
    /// Export a store back to a per-file sample tree.
    Unpack(UnpackArgs),
    /// Print one stored value.
    Get(GetArgs),
    /// Detect radar point clouds for every stored tensor.
    Cfar(CfarArgs),
    /// Solve camera or radar extrinsics from point correspondences.
    Calibrate(CalibrateArgs),
    /// Detect the trigger in a MoCap track and align sensor frames to it.
    Sync(SyncArgs),
    /// Train the linear regressor on a split of a dataset.
    Fit(FitArgs),
    /// Evaluate on the test part of a split and write the metrics table.
    Eval(EvalArgs),
    /// Compare random-access throughput of a store and a per-file tree.
    Bench(BenchArgs),
    /// Write train/val/test manifests for a dataset.
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Subject ids, e.g. `1-4,7`.
    #[arg(long)]
    pub subjects: Option<String>,
    /// Action ids, e.g. `1-30`.
    #[arg(long)]
    pub actions: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Clip length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Write a per-file sample tree instead of stores.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UnpackArgs {
    /// Store file.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Decode radar tensors into dense `M4RT` dumps (`.rt` files).
    #[arg(long)]
    pub dense: bool,
}

#[derive(Debug, Args)]
pub struct GetArgs {
    /// Store file, or a dataset directory together with `--modality`.
    #[arg(long)]
    pub store: PathBuf,
    /// Key in `S01/A05/F000123` form.
    #[arg(long, conflicts_with_all = ["subject", "action", "frame"], required_unless_present_all = ["subject", "action", "frame"])]
    pub key: Option<String>,
    #[arg(long, requires_all = ["action", "frame"])]
    pub subject: Option<u16>,
    #[arg(long, requires_all = ["subject", "frame"])]
    pub action: Option<u16>,
    #[arg(long, requires_all = ["subject", "action"])]
    pub frame: Option<u32>,
    /// `rt`, `rpc`, `mesh` or `calib`; used when `--store` is a directory.
    #[arg(long, default_value = "rt")]
    pub modality: String,
    /// Write the value here instead of the output stream.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CfarArgs {
    /// Dataset directory holding `rt.m4db`; `rpc.m4db` is written next to it.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub factor: Option<f64>,
    /// Guard half-widths `gx,gy,gz`.
    #[arg(long)]
    pub guard: Option<String>,
    /// Training half-widths `tx,ty,tz`.
    #[arg(long)]
    pub train: Option<String>,
    #[arg(long)]
    pub max_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyncArgs {
    /// `time_s,x,y,z,valid` CSV of the head marker.
    #[arg(long, visible_alias = "track")]
    pub markers: PathBuf,
    /// Number of sensor frames to align.
    #[arg(long)]
    pub frames: usize,
    #[arg(long, default_value_t = DEFAULT_MOCAP_RATE)]
    pub mocap_rate: f64,
    #[arg(long, default_value_t = DEFAULT_SENSOR_RATE)]
    pub sensor_rate: f64,
    #[arg(long, default_value_t = DEFAULT_TRIGGER_THRESHOLD)]
    pub threshold: f64,
    /// Seconds between the trigger and the first sensor frame.
    #[arg(long, default_value_t = 0.0)]
    pub sensor_offset: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct SplitSelect {
    /// Dataset directory.
    #[arg(long)]
    pub store: PathBuf,
    /// `s1`, `s2` or `s3`.
    #[arg(long, default_value = "s1")]
    pub split: String,
    #[arg(long, default_value = "all")]
    pub protocol: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Clone)]
pub struct TrainOptions {
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub select: SplitSelect,
    #[command(flatten)]
    pub train: TrainOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub select: SplitSelect,
    #[command(flatten)]
    pub train: TrainOptions,
    /// Checkpoint to evaluate; without it a model is fitted on the train part.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Average MRE over the 22 joint rotations only.
    #[arg(long)]
    pub mre_joints_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Store file.
    #[arg(long)]
    pub store: PathBuf,
    /// Per-file tree holding the same samples.
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub lookups: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset directory.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "s1")]
    pub kind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out subjects (s2) or actions (s3), e.g. `1-4`.
    #[arg(long)]
    pub held_out: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// `simulate` configuration file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub seed: u64,
    pub subjects: Vec<u16>,
    pub actions: Vec<u16>,
    pub duration_s: f64,
    pub noise_floor: Option<f64>,
    pub noise_model: Option<NoiseModel>,
    pub scatterer_sigma: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            seed: 0,
            subjects: vec![1],
            actions: vec![1],
            duration_s: ScenarioConfig::default().duration_s,
            noise_floor: None,
            noise_model: None,
            scatterer_sigma: None,
        }
    }
}

/// `fit` and `eval` training configuration file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub final_lr_ratio: f64,
    pub root_height: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let f = FitConfig::default();
        TrainConfig {
            steps: f.steps,
            lr: f.lr,
            final_lr_ratio: f.final_lr_ratio,
            root_height: f.root_height,
            weights: LossWeights::default(),
        }
    }
}

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Parses `1-4,7,9-10` into a sorted, de-duplicated list.
pub fn parse_id_list(s: &str) -> Result<Vec<u16>, CliError> {
    let bad = || CliError::Usage(format!("malformed id list {s:?}"));
    let mut ids = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u16 = a.trim().parse().map_err(|_| bad())?;
                let b: u16 = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                ids.extend(a..=b);
            }
            None => {
                ids.insert(part.parse().map_err(|_| bad())?);
            }
        }
    }
    if ids.is_empty() {
        return Err(bad());
    }
    Ok(ids.into_iter().collect())
}

fn parse_triple(s: &str) -> Result<[usize; 3], CliError> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().map_err(|_| {
        CliError::Usage(format!("expected three comma-separated integers, got {s:?}"))
    })?;
    v.try_into().map_err(|_| CliError::Usage(format!("expected three comma-separated integers, got {s:?}")))
}

fn configure_threads() -> Result<(), CliError> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    // A global pool may already exist when `run` is called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().target(env_logger::Target::Stderr).try_init();

    let outcome = panic::catch_unwind(AssertUnwindSafe(|| configure_threads().and_then(|_| execute(&cli.command))));
    match outcome {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => {
            eprintln!("error: internal failure");
            3
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Pack(a) => pack(a),
        Command::Unpack(a) => unpack(a),
        Command::Get(a) => get(a),
        Command::Cfar(a) => cfar(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Sync(a) => sync(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Split(a) => split(a),
    }
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| io_error(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(p, bytes).map_err(|e| io_error(p, e))
}

fn store_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(m.store_file_name())
}

fn open_store(dir: &Path, m: Modality) -> Result<Store, CliError> {
    let p = store_path(dir, m);
    if !p.exists() {
        return Err(CliError::Data(format!("{} not found", p.display())));
    }
    Ok(Store::open(&p)?)
}

fn marker_csv(track: &crate::sync::MarkerTrack) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time_s", "x", "y", "z", "valid"])?;
    for ((t, p), v) in track.times().iter().zip(track.samples()).zip(track.valid()) {
        w.write_record([format!("{t:.6}"), format!("{:.9}", p.x), format!("{:.9}", p.y), format!("{:.9}", p.z), (*v as u8).to_string()])?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg: SimulateConfig = load_toml(a.config.as_deref())?;
    if let Some(s) = &a.subjects {
        cfg.subjects = parse_id_list(s)?;
    }
    if let Some(s) = &a.actions {
        cfg.actions = parse_id_list(s)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.duration {
        cfg.duration_s = d;
    }
    if cfg.subjects.is_empty() || cfg.actions.is_empty() {
        return Err(CliError::Usage("at least one subject and one action are required".into()));
    }
    let grid = GridGeometry::radar_default();
    create_dir(&a.out)?;
    let mut rt = Vec::new();
    let mut mesh = Vec::new();
    for &subject in &cfg.subjects {
        for &action in &cfg.actions {
            let mut c = ScenarioConfig::for_action(subject, action, cfg.seed)?;
            c.duration_s = cfg.duration_s;
            if let Some(v) = cfg.noise_floor {
                c.noise_floor = v;
            }
            if let Some(v) = cfg.noise_model {
                c.noise_model = v;
            }
            if let Some(v) = cfg.scatterer_sigma {
                c.scatterer_sigma = v;
            }
            let seq = generate_sequence(&c, &grid)?;
            log::info!("rendered S{subject:02}/A{action:02}: {} frames", seq.frames.len());
            let encoded: Vec<Vec<u8>> = seq.frames.par_iter().map(codec::encode).collect::<Result<_, _>>()?;
            write_file(&a.out.join("markers").join(format!("S{subject:02}_A{action:02}.csv")), &marker_csv(&seq.marker_track)?)?;
            for ((key, bytes), gt) in seq.keys.iter().zip(encoded).zip(&seq.gt) {
                if a.raw {
                    write_file(&raw_sample_path(&a.out, key, Modality::Rt.tag()), &bytes)?;
                    write_file(&raw_sample_path(&a.out, key, Modality::Mesh.tag()), &serialize_params(gt))?;
                } else {
                    rt.push((*key, bytes));
                    mesh.push((*key, serialize_params(gt)));
                }
            }
        }
    }
    if !a.raw {
        let s = store::build(&store_path(&a.out, Modality::Rt), Modality::Rt.tag(), rt)?;
        store::build(&store_path(&a.out, Modality::Mesh), Modality::Mesh.tag(), mesh)?;
        println!("simulated {} frames into {}", s.entries, a.out.display());
    } else {
        println!("simulated {} clips into {}", cfg.subjects.len() * cfg.actions.len(), a.out.display());
    }
    Ok(())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<_> = fs::read_dir(dir).map_err(|e| io_error(dir, e))?.collect::<Result<_, _>>().map_err(|e| io_error(dir, e))?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn pack(a: &PackArgs) -> Result<(), CliError> {
    let mut files = Vec::new();
    collect_files(&a.input, &mut files)?;
    let mut by_modality: BTreeMap<String, Vec<(SampleKey, Vec<u8>)>> = BTreeMap::new();
    for p in files {
        let rel = p.strip_prefix(&a.input).expect("walked below input");
        if let Some((key, modality)) = parse_raw_sample_path(rel) {
            let bytes = fs::read(&p).map_err(|e| io_error(&p, e))?;
            by_modality.entry(modality).or_default().push((key, bytes));
        }
    }
    if by_modality.is_empty() {
        return Err(CliError::Data(format!("no samples found under {}", a.input.display())));
    }
    create_dir(&a.out)?;
    for (modality, entries) in by_modality {
        let path = a.out.join(format!("{modality}.m4db"));
        let s = store::build(&path, &modality, entries)?;
        println!("{modality}: {} entries, {} bytes -> {}", s.entries, s.file_bytes, path.display());
    }
    Ok(())
}

fn unpack(a: &UnpackArgs) -> Result<(), CliError> {
    let store = Store::open(&a.store)?;
    let n = if a.dense {
        if store.modality() != Modality::Rt.tag() {
            return Err(CliError::Usage(format!("--dense needs an rt store, got {}", store.modality())));
        }
        let mut n = 0;
        for item in store.scan(None, None) {
            let (key, bytes) = item?;
            let mut buf = Vec::new();
            codec::decode(bytes)?.write_dense_dump(&mut buf)?;
            write_file(&raw_sample_path(&a.out, &key, Modality::Rt.tag()).with_extension("rt"), &buf)?;
            n += 1;
        }
        n
    } else {
        export_directory(&store, &a.out)?
    };
    println!("exported {n} files to {}", a.out.display());
    Ok(())
}

fn get(a: &GetArgs) -> Result<(), CliError> {
    let key: SampleKey = match (&a.key, a.subject, a.action, a.frame) {
        (Some(k), ..) => k.parse().map_err(|e: store::StoreError| CliError::Usage(e.to_string()))?,
        (None, Some(s), Some(act), Some(f)) => SampleKey::new(s, act, f),
        _ => return Err(CliError::Usage("give --key or all of --subject, --action and --frame".into())),
    };
    let store = if a.store.is_dir() {
        let m = Modality::parse(&a.modality).ok_or_else(|| CliError::Usage(format!("unknown modality {:?}", a.modality)))?;
        open_store(&a.store, m)?
    } else {
        Store::open(&a.store)?
    };
    let bytes = store.get(&key)?;
    match &a.out {
        Some(p) => write_file(p, bytes),
        None => io::stdout().lock().write_all(bytes).map_err(|e| CliError::Data(e.to_string())),
    }
}

fn cfar(a: &CfarArgs) -> Result<(), CliError> {
    let mut cfg: CfarConfig = load_toml(a.config.as_deref())?;
    if let Some(f) = a.factor {
        cfg.threshold_factor = f;
    }
    if let Some(g) = &a.guard {
        cfg.guard = parse_triple(g)?;
    }
    if let Some(t) = &a.train {
        cfg.train = parse_triple(t)?;
    }
    if let Some(m) = a.max_points {
        cfg.max_points = m;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let rt = open_store(&a.store, Modality::Rt)?;
    let keys: Vec<SampleKey> = rt.keys().collect();
    let clouds: Vec<(SampleKey, RadarPointCloud)> = keys
        .par_iter()
        .map(|k| -> Result<_, CliError> { Ok((*k, cfar_detect(&codec::decode(rt.get(k)?)?, &cfg)?)) })
        .collect::<Result<_, _>>()?;
    let counts: Vec<usize> = clouds.iter().map(|(_, c)| c.len()).collect();
    let path = store_path(&a.store, Modality::Rpc);
    store::build(&path, Modality::Rpc.tag(), clouds.into_iter().map(|(k, c)| (k, c.to_bytes())))?;
    let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
    println!(
        "{} frames, points per frame mean {mean:.1} min {} max {} -> {}",
        counts.len(),
        counts.iter().min().unwrap_or(&0),
        counts.iter().max().unwrap_or(&0),
        path.display()
    );
    Ok(())
}

fn calibrate(a: &CalibrateArgs) -> Result<(), CliError> {
    let k: CameraIntrinsics = {
        let text = fs::read_to_string(&a.intrinsics).map_err(|e| io_error(&a.intrinsics, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.intrinsics.display())))?
    };
    k.validate()?;
    let points: PointFile = {
        let text = fs::read_to_string(&a.points).map_err(|e| io_error(&a.points, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.points.display())))?
    };
    let v3 = |p: [f64; 3]| Vec3::new(p[0], p[1], p[2]);
    let result = if points.points.iter().all(|p| p.pixel.is_some()) && !points.points.is_empty() {
        let corr: Vec<Correspondence> = points
            .points
            .iter()
            .map(|p| {
                let px = p.pixel.expect("checked");
                Correspondence { world: v3(p.world), pixel: (px[0], px[1]) }
            })
            .collect();
        let r = solve_pnp(&k, &corr)?;
        ResultFile::from_transform(&r.extrinsics, Some(r.mean_reprojection_error), r.per_point_residuals)
    } else if points.points.iter().all(|p| p.target.is_some()) && !points.points.is_empty() {
        let src: Vec<Vec3> = points.points.iter().map(|p| v3(p.world)).collect();
        let dst: Vec<Vec3> = points.points.iter().map(|p| v3(p.target.expect("checked"))).collect();
        let t = solve_absolute_orientation(&src, &dst)?;
        let residuals = src.iter().zip(&dst).map(|(s, d)| (t.rotation.rotate(s) + t.translation - d).norm()).collect();
        ResultFile::from_transform(&t, None, residuals)
    } else {
        return Err(CliError::Data("every point needs a pixel, or every point needs a target".into()));
    };
    let text = toml::to_string(&result).map_err(|e| CliError::Internal(e.to_string()))?;
    match &a.out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sync(a: &SyncArgs) -> Result<(), CliError> {
    let file = File::open(&a.markers).map_err(|e| io_error(&a.markers, e))?;
    let track = read_track_csv(BufReader::new(file), a.mocap_rate)?;
    let trigger = detect_trigger(&track, a.threshold)?;
    log::info!("trigger at MoCap sample {trigger}");
    let clock = SensorClock { rate: a.sensor_rate, start_offset: a.sensor_offset };
    let alignment = align_to_trigger(&track, trigger, &clock, a.frames)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sensor_frame", "mocap_index", "valid"])?;
    for (j, (idx, v)) in alignment.indices.iter().zip(&alignment.valid).enumerate() {
        w.write_record([j.to_string(), idx.to_string(), (*v as u8).to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    match &a.out {
        Some(p) => write_file(p, &bytes),
        None => io::stdout().lock().write_all(&bytes).map_err(|e| CliError::Data(e.to_string())),
    }
}

/// Localization and features for every requested key, in key order.
/// Clips are decoded one at a time so only a clip's frames are in memory.
fn prepare_keys(rt: &Store, mesh: &Store, keys: &BTreeSet<SampleKey>) -> Result<Vec<(SampleKey, PreparedSample)>, CliError> {
    let mut clips: BTreeMap<(u16, u16), Vec<SampleKey>> = BTreeMap::new();
    for k in keys {
        clips.entry((k.subject_id, k.action_id)).or_default().push(*k);
    }
    let clips: Vec<_> = clips.into_iter().collect();
    let per_clip: Vec<Vec<(SampleKey, PreparedSample)>> = clips
        .par_iter()
        .map(|((s, a), wanted)| -> Result<_, CliError> {
            let mut frame_keys = Vec::new();
            let mut frames = Vec::new();
            for entry in rt.scan(Some(*s), Some(*a)) {
                let (k, bytes) = entry?;
                frame_keys.push(k);
                frames.push(codec::decode(bytes)?);
            }
            let mut out = Vec::with_capacity(wanted.len());
            for k in wanted {
                let pos = frame_keys
                    .binary_search(k)
                    .map_err(|_| CliError::Data(format!("no radar tensor for {k}")))?;
                let stack = stack_window(&frames, pos, DEFAULT_STACK)?;
                let gt = deserialize_params(mesh.get(k)?)?;
                out.push((*k, prepare_sample(&stack, &gt)?));
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

struct Selection {
    rt: Store,
    mesh: Store,
    protocol: ProtocolId,
    split_label: &'static str,
    train: BTreeSet<SampleKey>,
    test: BTreeSet<SampleKey>,
}

fn select(s: &SplitSelect) -> Result<Selection, CliError> {
    let protocol: ProtocolId = s.protocol.parse().map_err(|e: crate::metrics::MetricsError| CliError::Usage(e.to_string()))?;
    let kind: SplitKind = s.split.parse().map_err(|e: crate::metrics::MetricsError| CliError::Usage(e.to_string()))?;
    let rt = open_store(&s.store, Modality::Rt)?;
    let mesh = open_store(&s.store, Modality::Mesh)?;
    let catalogue: Vec<SampleKey> = rt.keys().filter(|k| mesh.contains(k)).collect();
    let split = make_split(&catalogue, &SplitSpec::new(kind, s.seed))?;
    let keep = |set: &BTreeSet<SampleKey>| set.iter().filter(|k| protocol.contains(k.action_id)).copied().collect();
    Ok(Selection { protocol, split_label: kind.label(), train: keep(&split.train), test: keep(&split.test), rt, mesh })
}

fn train(sel: &Selection, opts: &TrainOptions) -> Result<LinearRegressor, CliError> {
    let mut cfg: TrainConfig = load_toml(opts.config.as_deref())?;
    if let Some(s) = opts.steps {
        cfg.steps = s;
    }
    if let Some(lr) = opts.lr {
        cfg.lr = lr;
    }
    if sel.train.is_empty() {
        return Err(CliError::Data("the train part of the split is empty".into()));
    }
    let data: Vec<PreparedSample> = prepare_keys(&sel.rt, &sel.mesh, &sel.train)?.into_iter().map(|(_, p)| p).collect();
    let fit_cfg = FitConfig { steps: cfg.steps, lr: cfg.lr, final_lr_ratio: cfg.final_lr_ratio, root_height: cfg.root_height };
    let result = fit_prepared(&data, &cfg.weights, &fit_cfg)?;
    log::info!(
        "trained on {} samples: loss {:.6} -> {:.6}",
        data.len(),
        result.loss_trace.first().copied().unwrap_or(f64::NAN),
        result.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(result.model)
}

fn fit(a: &FitArgs) -> Result<(), CliError> {
    let sel = select(&a.select)?;
    let model = train(&sel, &a.train)?;
    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf)?;
    write_file(&a.out, &buf)?;
    println!("wrote {} ({} train samples)", a.out.display(), sel.train.len());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let sel = select(&a.select)?;
    let model = match &a.model {
        Some(p) => {
            let f = File::open(p).map_err(|e| io_error(p, e))?;
            LinearRegressor::read_checkpoint(BufReader::new(f))?
        }
        None => train(&sel, &a.train)?,
    };
    let prepared = prepare_keys(&sel.rt, &sel.mesh, &sel.test)?;
    let records: Vec<EvalRecord> = prepared
        .iter()
        .map(|(k, p)| -> Result<_, CliError> { Ok(EvalRecord { key: *k, pred: model.predict_features(&p.loc, &p.features)?, gt: p.gt }) })
        .collect::<Result<_, _>>()?;
    let opts = MetricOptions { mre_include_alpha: !a.mre_joints_only };
    let body = BodyModel::standard();
    let protocols: Vec<ProtocolId> = match sel.protocol {
        ProtocolId::All => ProtocolId::ALL_IDS.to_vec(),
        p => vec![p],
    };
    let rows = protocols
        .iter()
        .map(|&p| aggregate(&body, &records, p, sel.split_label, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    match &a.out {
        Some(p) => {
            let mut buf = Vec::new();
            write_csv(&mut buf, &rows)?;
            write_file(p, &buf)
        }
        None => Ok(write_csv(io::stdout().lock(), &rows)?),
    }
}

fn bench(a: &BenchArgs) -> Result<(), CliError> {
    if a.lookups == 0 {
        return Err(CliError::Usage("--lookups must be positive".into()));
    }
    let store = Store::open(&a.store)?;
    let all: Vec<SampleKey> = store.keys().collect();
    drop(store);
    if all.is_empty() {
        return Err(CliError::Data("store is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let keys: Vec<SampleKey> = (0..a.lookups).map(|_| *all.choose(&mut rng).expect("nonempty")).collect();
    let s = bench_access(&a.store, &a.raw, &keys)?;
    let mut out = io::stdout().lock();
    let line = |out: &mut io::StdoutLock, name: &str, t: &store::Throughput| {
        writeln!(out, "{name}: {:.0} lookups/s, {:.1} MB/s", t.lookups_per_sec, t.bytes_per_sec / 1e6)
    };
    let report = (|| -> io::Result<()> {
        writeln!(out, "lookups: {}", s.lookups)?;
        line(&mut out, "store_cold", &s.store_cold)?;
        line(&mut out, "store_warm", &s.store_warm)?;
        line(&mut out, "baseline_cold", &s.baseline_cold)?;
        line(&mut out, "baseline_warm", &s.baseline_warm)
    })();
    report.map_err(|e| CliError::Data(e.to_string()))
}

fn split(a: &SplitArgs) -> Result<(), CliError> {
    let kind: SplitKind = a.kind.parse().map_err(|e: crate::metrics::MetricsError| CliError::Usage(e.to_string()))?;
    let mut spec = SplitSpec::new(kind, a.seed);
    if let Some(h) = &a.held_out {
        spec.held_out = parse_id_list(h)?;
    }
    let rt = open_store(&a.store, Modality::Rt)?;
    let catalogue: Vec<SampleKey> = rt.keys().collect();
    let split = make_split(&catalogue, &spec)?;
    create_dir(&a.out)?;
    for (name, keys) in split.parts() {
        let path = a.out.join(format!("{name}.txt"));
        let f = File::create(&path).map_err(|e| io_error(&path, e))?;
        let mut w = BufWriter::new(f);
        write_manifest(&mut w, keys)?;
        w.flush().map_err(|e| io_error(&path, e))?;
        println!("{name}: {} keys -> {}", keys.len(), path.display());
    }
    Ok(())
}
