//! Command-line entry points: `synth`, `align`, `evaluate`, `analyze`.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 flagged instances under
//! `--strict`, 5 id mismatch or rejected records.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::codec::{OffsetCodec, OffsetVec};
use crate::dataio::{self, canon, Dataset, PredictionFile, PredictionRecord, TrajectoryRow};
use crate::denoise::{self, OscillationOptions, Schedule, TtaConfig, TtaStrategy};
use crate::error::{Error, Result};
use crate::geometry::{pad_batch, CentroidMode, Point2};
use crate::metrics::{self, Report};
use crate::par;
use crate::predictor::{
    alignment_loss, CorrelationParams, CorrelationPredictor, CorrelationScore, HiddenTruth,
    OffsetPredictor, OraclePredictor, OraclePredictorParams, PredictionStatus, DEFAULT_GAMMA,
};
use crate::synth::{self, DatasetConfig, SceneConfig};

/// Environment variable supplying the default dataset root.
pub const DATA_ENV: &str = "LABEL_ALIGN_DATA";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FLAGGED: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => EXIT_IO,
        Error::RejectedRecords(_) | Error::IdMismatch(_) => EXIT_MISMATCH,
        _ => EXIT_USAGE,
    }
}

#[derive(Parser, Debug)]
#[command(name = "label-align", version, about = "Align historical building labels with imagery evidence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic benchmark dataset.
    Synth(SynthArgs),
    /// Align a dataset's labels and write predictions.
    Align(AlignArgs),
    /// Score predictions against a dataset.
    Evaluate(EvaluateArgs),
    /// Schedule energy grids and convergence analysis of trajectory dumps.
    Analyze(AnalyzeArgs),
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => {
            let a = a.parse::<f64>().map_err(|e| e.to_string())?;
            let b = b.parse::<f64>().map_err(|e| e.to_string())?;
            Ok((a, b))
        }
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

fn parse_size_pair(s: &str) -> std::result::Result<(u32, u32), String> {
    let (a, b) = parse_pair(s)?;
    if a < 0.0 || b < 0.0 || a.fract() != 0.0 || b.fract() != 0.0 {
        return Err(format!("expected two non-negative integers, got {s:?}"));
    }
    Ok((a as u32, b as u32))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long, env = DATA_ENV)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub images: usize,
    /// Buildings per image.
    #[arg(long, default_value_t = 8)]
    pub buildings: usize,
    /// Per-axis std of the label misplacement, px.
    #[arg(long, default_value_t = 20.0)]
    pub nu: f64,
    /// Roof-offset magnitude range "lo,hi", px.
    #[arg(long, value_parser = parse_pair, default_value = "20,60")]
    pub height_range: (f64, f64),
    /// Footprint side-length range "lo,hi", px.
    #[arg(long, value_parser = parse_size_pair, default_value = "24,64")]
    pub size_range: (u32, u32),
    /// Roof-offset direction in degrees; drawn per image when omitted.
    #[arg(long)]
    pub azimuth: Option<f64>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Fraction of images rendered near-nadir (zero roof offset).
    #[arg(long, default_value_t = 0.0)]
    pub near_nadir_ratio: f64,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    /// Box-blur radius of the evidence channels, px.
    #[arg(long, default_value_t = 1)]
    pub blur_radius: u32,
    /// Minimum gap between footprint bounding boxes, px.
    #[arg(long, default_value_t = 6)]
    pub min_gap: u32,
}

impl SynthArgs {
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            scene: SceneConfig {
                width: self.width,
                height: self.height,
                n_buildings: self.buildings,
                size_range: self.size_range,
                height_range: self.height_range,
                view_azimuth: self.azimuth.map(f64::to_radians),
                osm_nu: self.nu,
                blur_radius: self.blur_radius,
                min_gap: self.min_gap,
                seed: self.seed,
            },
            n_images: self.images,
            near_nadir_ratio: self.near_nadir_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Oracle,
    #[default]
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TtaArg {
    None,
    T1,
    #[value(name = "t1_5")]
    #[serde(rename = "t1_5")]
    T15,
}

impl From<TtaArg> for TtaStrategy {
    fn from(t: TtaArg) -> Self {
        match t {
            TtaArg::None => TtaStrategy::None,
            TtaArg::T1 => TtaStrategy::T1,
            TtaArg::T15 => TtaStrategy::T15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScoreArg {
    OverlapSum,
    NormalizedOverlap,
    Zncc,
}

impl From<ScoreArg> for CorrelationScore {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::OverlapSum => CorrelationScore::OverlapSum,
            ScoreArg::NormalizedOverlap => CorrelationScore::NormalizedOverlap,
            ScoreArg::Zncc => CorrelationScore::Zncc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub oracle: OraclePredictorParams,
    pub footprint: CorrelationParams,
    pub roof: CorrelationParams,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Correlation,
            oracle: OraclePredictorParams::default(),
            footprint: CorrelationParams::footprint_default(),
            roof: CorrelationParams::roof_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    /// Defaults to `<dataset>/predictions.json`.
    pub predictions: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    /// Defaults to `config.json` next to the predictions.
    pub config: Option<PathBuf>,
}

/// Effective configuration of an `align` run. Also the schema of
/// `config.json`; a config file may give any subset of the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub predictor: PredictorConfig,
    pub schedule: Schedule,
    pub tta: TtaConfig,
    pub codec: OffsetCodec,
    pub gamma: f64,
    /// Master seed; copied into the oracle and TTA seeds.
    pub seed: u64,
    pub outputs: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            predictor: PredictorConfig::default(),
            schedule: Schedule::default(),
            tta: TtaConfig::default(),
            codec: OffsetCodec::default(),
            gamma: DEFAULT_GAMMA,
            seed: 0,
            outputs: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.predictor.oracle.validate()?;
        self.predictor.footprint.validate()?;
        self.predictor.roof.validate()?;
        self.schedule.validate()?;
        self.tta.validate()?;
        self.codec.validate()?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.outputs
            .predictions
            .clone()
            .unwrap_or_else(|| self.dataset.join("predictions.json"))
    }

    pub fn config_path(&self) -> PathBuf {
        self.outputs.config.clone().unwrap_or_else(|| {
            self.predictions_path()
                .parent()
                .unwrap_or(Path::new(""))
                .join("config.json")
        })
    }

    /// Fill derived fields so the echoed config is fully explicit.
    fn resolve(mut self) -> Self {
        self.predictor.oracle.seed = self.seed;
        self.tta.seed = self.seed;
        self.outputs.predictions = Some(self.predictions_path());
        self.outputs.config = Some(self.config_path());
        self
    }
}

/// Recursively overlay `over` onto `base`; objects merge, anything else
/// replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Args, Debug, Default)]
pub struct AlignArgs {
    /// Dataset directory.
    #[arg(long, env = DATA_ENV)]
    pub dataset: Option<PathBuf>,
    /// JSON config file; flags override it, it overrides defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output predictions file [default: <dataset>/predictions.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a JSONL trajectory dump here.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Where to echo the effective config [default: config.json next to the predictions]
    #[arg(long)]
    pub config_out: Option<PathBuf>,
    /// Offset predictor [default: correlation]
    #[arg(long, value_enum)]
    pub predictor: Option<PredictorKind>,
    /// Oracle contraction factor [default: 1]
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Oracle per-axis noise std, px [default: 0]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Footprint-stage correlation search radius, px [default: 32]
    #[arg(long)]
    pub search_radius: Option<u32>,
    /// Roof-stage correlation search radius, px [default: 72]
    #[arg(long)]
    pub roof_search_radius: Option<u32>,
    /// Correlation score [default: zncc]
    #[arg(long, value_enum)]
    pub score: Option<ScoreArg>,
    /// Background border around the stencil for zncc, px [default: 4]
    #[arg(long)]
    pub margin: Option<u32>,
    /// Schedule decay factor [default: 1]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Denoising steps [default: 5]
    #[arg(long)]
    pub steps: Option<u32>,
    /// Test-time augmentation [default: none]
    #[arg(long, value_enum)]
    pub tta: Option<TtaArg>,
    /// t1 runs [default: 4]
    #[arg(long)]
    pub tta_runs: Option<u32>,
    /// t1.5 extra steps [default: 5]
    #[arg(long)]
    pub tta_extra_steps: Option<u32>,
    /// t1 perturbation std, px [default: 5]
    #[arg(long)]
    pub tta_sigma: Option<f64>,
    /// Codec shift "dx,dy" [default: 0,0]
    #[arg(long, value_parser = parse_pair)]
    pub alpha: Option<(f64, f64)>,
    /// Codec scale [default: 200]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Offset-loss weight [default: 0.1]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Master seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Exit with status 4 if any instance is flagged.
    #[arg(long)]
    pub strict: bool,
}

impl AlignArgs {
    /// Defaults, then the config file, then flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("plain config");
        if let Some(path) = &self.config {
            let file: Value = dataio::read_json(path)?;
            if !file.is_object() {
                return Err(Error::format(path, "config must be a JSON object"));
            }
            merge(&mut value, file);
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.outputs.predictions = Some(v.clone());
        }
        if let Some(v) = &self.trajectories {
            cfg.outputs.trajectories = Some(v.clone());
        }
        if let Some(v) = &self.config_out {
            cfg.outputs.config = Some(v.clone());
        }
        let p = &mut cfg.predictor;
        if let Some(v) = self.predictor {
            p.kind = v;
        }
        if let Some(v) = self.kappa {
            p.oracle.kappa = v;
        }
        if let Some(v) = self.rho {
            p.oracle.rho = v;
        }
        if let Some(v) = self.search_radius {
            p.footprint.search_radius = v;
        }
        if let Some(v) = self.roof_search_radius {
            p.roof.search_radius = v;
        }
        if let Some(v) = self.score {
            p.footprint.score = v.into();
            p.roof.score = v.into();
        }
        if let Some(v) = self.margin {
            p.footprint.margin = v;
            p.roof.margin = v;
        }
        if let Some(v) = self.delta {
            cfg.schedule.delta = v;
        }
        if let Some(v) = self.steps {
            cfg.schedule.steps = v;
        }
        if let Some(v) = self.tta {
            cfg.tta.strategy = v.into();
        }
        if let Some(v) = self.tta_runs {
            cfg.tta.runs = v;
        }
        if let Some(v) = self.tta_extra_steps {
            cfg.tta.extra_steps = v;
        }
        if let Some(v) = self.tta_sigma {
            cfg.tta.perturb_sigma = v;
        }
        if let Some((dx, dy)) = self.alpha {
            cfg.codec.alpha = OffsetVec::new(dx, dy);
        }
        if let Some(v) = self.beta {
            cfg.codec.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        let cfg = cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CentroidArg {
    Area,
    VertexMean,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Dataset directory.
    #[arg(long, env = DATA_ENV)]
    pub dataset: PathBuf,
    /// Predictions file [default: <dataset>/predictions.json]
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Directory for metrics.json and metrics.csv [default: the predictions' directory]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Centroid used for EPE.
    #[arg(long, value_enum, default_value = "area")]
    pub centroid: CentroidArg,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Emit a (delta, steps, energy) CSV over the given grid.
    #[arg(long, conflicts_with = "trajectories")]
    pub grid: bool,
    /// Decay factors for --grid, comma-separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub delta: Vec<f64>,
    /// Step counts for --grid, comma-separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub steps: Vec<u32>,
    /// Trajectory dump written by `align --trajectories`.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Dataset supplying ground truth for trajectory EPE.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output file (--grid, default stdout) or directory (--trajectories,
    /// default next to the dump).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// First step of the oscillation windows.
    #[arg(long, default_value_t = 10)]
    pub window_start: usize,
    /// Oscillation window width.
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    /// Relative tolerance for a stable running mean.
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
}

/// Parse `args` (including the program name) and run, writing the command
/// summary to `out`. Returns the process exit code.
pub fn run_to<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Align(a) => cmd_align(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_to(args, &mut std::io::stdout().lock())
}

fn emit(out: &mut dyn Write, v: &Value) -> Result<()> {
    writeln!(out, "{}", canon::to_pretty(v)).map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = args.dataset_config();
    cfg.validate()?;
    let (dataset, unplaced) = synth::build_dataset(&cfg, &args.out)?;
    emit(
        out,
        &json!({
            "images": dataset.manifest.images.len(),
            "instances": dataset.records.len(),
            "seed": cfg.scene.seed,
            "mean_initial_displacement": synth::mean_displacement(dataset.records.iter().map(|r| &r.f_vec)),
            "unplaced": unplaced,
            "out": args.out,
        }),
    )?;
    Ok(EXIT_OK)
}

/// Per-image alignment output.
#[derive(Debug, Clone)]
pub struct ImageAlignment {
    pub image_id: u32,
    pub predictions: Vec<PredictionRecord>,
    pub rows: Vec<TrajectoryRow>,
    /// Per-step EPE sums of the first run, `t = 0..`.
    pub step_epe_sums: Vec<f64>,
    pub footprint_epe: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Everything `align` produces before it is written.
#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub config: RunConfig,
    pub images: Vec<ImageAlignment>,
}

impl AlignOutput {
    pub fn predictions(&self) -> Vec<PredictionRecord> {
        self.images.iter().flat_map(|i| i.predictions.iter().cloned()).collect()
    }

    pub fn instances(&self) -> usize {
        self.images.iter().map(|i| i.predictions.len()).sum()
    }

    pub fn per_step_mean_epe(&self) -> Vec<f64> {
        let n = self.instances().max(1) as f64;
        let len = self.images.iter().map(|i| i.step_epe_sums.len()).max().unwrap_or(0);
        (0..len)
            .map(|t| self.images.iter().map(|i| i.step_epe_sums.get(t).copied().unwrap_or(0.0)).sum::<f64>() / n)
            .collect()
    }

    pub fn mean_footprint_epe(&self) -> f64 {
        let n = self.instances().max(1) as f64;
        self.images.iter().flat_map(|i| &i.footprint_epe).sum::<f64>() / n
    }

    pub fn mean_loss(&self) -> f64 {
        let n = self.instances().max(1) as f64;
        self.images.iter().flat_map(|i| &i.losses).sum::<f64>() / n
    }

    pub fn flagged(&self) -> usize {
        self.images
            .iter()
            .flat_map(|i| &i.predictions)
            .filter(|p| !p.flags.is_empty())
            .count()
    }
}

fn status_flags(flags: &mut Vec<String>, prefix: &str, statuses: impl Iterator<Item = PredictionStatus>) {
    let mut boundary = false;
    let mut failed = false;
    for s in statuses {
        boundary |= s == PredictionStatus::WindowBoundary;
        failed |= s == PredictionStatus::Failed;
    }
    if boundary {
        flags.push(format!("{prefix}window_boundary"));
    }
    if failed {
        flags.push(format!("{prefix}failed"));
    }
}

/// Run the two-stage alignment over every image of a loaded dataset.
pub fn align_dataset(dataset: &Dataset, cfg: &RunConfig) -> Result<AlignOutput> {
    cfg.validate()?;
    let correlation = CorrelationPredictor {
        footprint: cfg.predictor.footprint,
        roof: cfg.predictor.roof,
    };
    let results = par::map_slice(&dataset.manifest.images, |k, image| -> Result<ImageAlignment> {
        let records = dataset.records_of(image.id);
        let mut ctx = dataset.channels[k].context();
        let oracle;
        let predictor: &dyn OffsetPredictor = match cfg.predictor.kind {
            PredictorKind::Correlation => &correlation,
            PredictorKind::Oracle => {
                ctx = ctx.with_truth(HiddenTruth {
                    footprints: records.iter().map(|r| r.footprint.centroid()).collect(),
                    roofs: records.iter().map(|r| r.roof.centroid()).collect(),
                });
                oracle = OraclePredictor::new(cfg.predictor.oracle)?.with_stream(u64::from(image.id));
                &oracle
            }
        };
        if records.is_empty() {
            return Ok(ImageAlignment {
                image_id: image.id,
                predictions: Vec::new(),
                rows: Vec::new(),
                step_epe_sums: Vec::new(),
                footprint_epe: Vec::new(),
                losses: Vec::new(),
            });
        }
        let labels: Vec<_> = records.iter().map(|r| r.osm.clone()).collect();
        let batch = pad_batch(&labels)?;
        let result = denoise::align(&ctx, &batch, predictor, &cfg.schedule, &cfg.tta)?;
        let ids: Vec<u64> = records.iter().map(|r| r.id).collect();
        let truth: Vec<Point2> = records.iter().map(|r| r.footprint.centroid()).collect();

        let first = &result.footprint.trajectories[0];
        let step_epe_sums = (0..=first.len())
            .map(|t| first.mean_epe(t, &truth) * truth.len() as f64)
            .collect();
        let rows = if cfg.outputs.trajectories.is_some() {
            result
                .footprint
                .trajectories
                .iter()
                .flat_map(|t| dataio::trajectory_rows(t, image.id, &ids))
                .collect()
        } else {
            Vec::new()
        };
        let dump = cfg.outputs.trajectories.as_ref().map(|p| p.display().to_string());
        let footprints = result.footprint.footprints.polygons();
        let roofs = result.roof.roofs.polygons();
        let mut predictions = Vec::with_capacity(records.len());
        let mut footprint_epe = Vec::with_capacity(records.len());
        let mut losses = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let mut flags = Vec::new();
            if result.footprint.frozen[i] {
                flags.push("frozen".to_owned());
            }
            // a boundary hit mid-run is usually finished by later steps; only
            // one on the final step leaves the correction possibly incomplete
            status_flags(
                &mut flags,
                "",
                result.footprint.trajectories.iter().filter_map(|t| t.steps.last().map(|s| s.status[i])),
            );
            status_flags(&mut flags, "roof_", std::iter::once(result.roof.status[i]));
            let f_hat = result.footprint.offsets[i];
            let o_hat = result.roof.offsets[i];
            footprint_epe.push(footprints[i].centroid().distance(truth[i]));
            losses.push(alignment_loss(
                cfg.codec.encode(f_hat),
                cfg.codec.encode(r.f_vec),
                cfg.codec.encode(o_hat),
                cfg.codec.encode(r.o_vec),
                cfg.gamma,
            ));
            predictions.push(PredictionRecord {
                id: r.id,
                footprint: footprints[i].clone(),
                roof: roofs[i].clone(),
                o_hat,
                flags,
                trajectory: dump.clone(),
            });
        }
        Ok(ImageAlignment {
            image_id: image.id,
            predictions,
            rows,
            step_epe_sums,
            footprint_epe,
            losses,
        })
    });
    Ok(AlignOutput {
        config: cfg.clone(),
        images: results.into_iter().collect::<Result<_>>()?,
    })
}

pub fn cmd_align(args: &AlignArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = args.run_config()?;
    let dataset = dataio::load_dataset(&cfg.dataset, false)?.dataset;
    let result = align_dataset(&dataset, &cfg)?;
    let config_value = serde_json::to_value(&cfg).expect("plain config");

    dataio::write_predictions(
        &cfg.predictions_path(),
        &PredictionFile {
            config: config_value.clone(),
            predictions: result.predictions(),
        },
    )?;
    if let Some(path) = &cfg.outputs.trajectories {
        let rows: Vec<TrajectoryRow> = result.images.iter().flat_map(|i| i.rows.iter().cloned()).collect();
        dataio::write_trajectories(path, &rows)?;
    }
    dataio::write_json(
        &cfg.config_path(),
        &json!({ "format_version": dataio::FORMAT_VERSION, "config": config_value }),
    )?;

    let flagged = result.flagged();
    emit(
        out,
        &json!({
            "config": config_value,
            "images": result.images.len(),
            "instances": result.instances(),
            "per_step_mean_epe": result.per_step_mean_epe(),
            "final_mean_epe_footprint": result.mean_footprint_epe(),
            "mean_alignment_loss": result.mean_loss(),
            "flagged": flagged,
        }),
    )?;
    Ok(if args.strict && flagged > 0 { EXIT_FLAGGED } else { EXIT_OK })
}

/// Score a predictions file against a dataset directory.
pub fn evaluate_paths(dataset: &Path, predictions: &Path, centroid: CentroidMode) -> Result<(Report, Value)> {
    let dataset = dataio::load_dataset(dataset, false)?.dataset;
    let file = dataio::load_predictions(predictions, &dataset.record_ids())?;
    let report = metrics::evaluate(&dataset, &file.predictions, centroid)?;
    Ok((report, file.config))
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let predictions = args
        .predictions
        .clone()
        .unwrap_or_else(|| args.dataset.join("predictions.json"));
    let centroid = match args.centroid {
        CentroidArg::Area => CentroidMode::Area,
        CentroidArg::VertexMean => CentroidMode::VertexMean,
    };
    let (report, align_config) = evaluate_paths(&args.dataset, &predictions, centroid)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| predictions.parent().unwrap_or(Path::new("")).to_path_buf());
    let config = json!({
        "dataset": args.dataset,
        "predictions": predictions,
        "centroid": centroid,
        "align": align_config,
    });
    dataio::write_json(
        &dir.join("metrics.json"),
        &json!({ "format_version": dataio::FORMAT_VERSION, "config": config, "metrics": report }),
    )?;
    dataio::write_csv(&dir.join("metrics.csv"), &Report::CSV_HEADER, &[report.csv_row()])?;
    emit(
        out,
        &json!({
            "mf": report.mf,
            "mi": report.mi,
            "mean_epe_footprint": report.mean_epe_footprint,
            "mean_epe_roof": report.mean_epe_roof,
            "ale": report.ale,
            "instances": report.instances,
        }),
    )?;
    Ok(EXIT_OK)
}

/// `delta,steps,energy` CSV over a grid.
pub fn energy_grid_csv(deltas: &[f64], steps: &[u32]) -> Result<String> {
    if deltas.is_empty() || steps.is_empty() {
        return Err(Error::InvalidParameter("--grid needs --delta and --steps values".into()));
    }
    let mut text = String::from("delta,steps,energy\n");
    for &d in deltas {
        for &t in steps {
            let s = Schedule::new(d, t)?;
            text.push_str(&format!("{d},{t},{:.4}\n", s.energy()));
        }
    }
    Ok(text)
}

fn schedule_of(traj: &denoise::Trajectory) -> Schedule {
    let delta = match traj.steps.as_slice() {
        [a, b, ..] if a.weight > 0.0 => b.weight / a.weight,
        _ => 1.0,
    };
    Schedule {
        delta,
        steps: traj.len() as u32,
    }
}

/// Scatter plot of cumulative energy against mean EPE.
pub fn scatter_svg(points: &[(f64, f64)], x_label: &str, y_label: &str) -> String {
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let xmax = points.iter().map(|p| p.0).fold(0.0, f64::max).max(1e-9);
    let ymax = points.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9);
    let sx = |x: f64| pad + x / xmax * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / ymax * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">{x_label} (max {xmax:.2})</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\">{y_label} (max {ymax:.2})</text>\n",
        y0 = h - pad,
        x1 = w - pad,
        cx = w / 2.0,
        ty = h - 12.0,
        cy = h / 2.0,
    );
    for &(x, y) in points {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>\n",
            sx(x),
            sy(y)
        ));
    }
    s.push_str("</svg>\n");
    s
}

pub fn cmd_analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> Result<i32> {
    if args.grid {
        let csv = energy_grid_csv(&args.delta, &args.steps)?;
        match &args.out {
            Some(p) => dataio::write_text(p, &csv)?,
            None => out.write_all(csv.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
        }
        return Ok(EXIT_OK);
    }
    let Some(path) = &args.trajectories else {
        return Err(Error::InvalidParameter("analyze needs --grid or --trajectories".into()));
    };
    let rows = dataio::read_trajectories(path)?;
    let loaded = dataio::assemble_trajectories(path, &rows)?;
    if loaded.is_empty() {
        return Err(Error::format(path, "no trajectories"));
    }
    let truth = match &args.dataset {
        Some(root) => {
            let ds = dataio::load_dataset(root, false)?.dataset;
            let by_id: std::collections::BTreeMap<u64, Point2> =
                ds.records.iter().map(|r| (r.id, r.footprint.centroid())).collect();
            let t = loaded
                .iter()
                .map(|l| {
                    l.instance_ids
                        .iter()
                        .map(|id| {
                            by_id
                                .get(id)
                                .copied()
                                .ok_or_else(|| Error::IdMismatch(format!("trajectory id {id} not in dataset")))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Some(t)
        }
        None => None,
    };
    let trajectories: Vec<_> = loaded.into_iter().map(|l| l.trajectory).collect();
    let schedule = schedule_of(&trajectories[0]);
    let opts = OscillationOptions {
        window_start: args.window_start,
        window: args.window,
        nu: None,
        tolerance: args.tolerance,
    };
    let report = denoise::analyze_oscillation(&trajectories, truth.as_deref(), &schedule, &opts)?;

    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new("")).to_path_buf());
    let f = canon::format_float;
    let steps = report.steps;
    let csv_rows: Vec<Vec<String>> = (1..=steps)
        .map(|t| {
            vec![
                t.to_string(),
                report.per_step_mean_epe.as_ref().map_or(String::new(), |e| f(e[t])),
                f(report.step_energies[t - 1]),
                if t >= report.window_start {
                    f(report.running_means[t - report.window_start])
                } else {
                    String::new()
                },
            ]
        })
        .collect();
    dataio::write_csv(&dir.join("per_step.csv"), &["t", "mean_epe", "step_energy", "running_mean"], &csv_rows)?;

    let cumulative: Vec<f64> = (0..=steps)
        .map(|t| trajectories[0].steps[..t].iter().map(|s| s.weight).sum())
        .collect();
    let (points, y_label): (Vec<(f64, f64)>, &str) = match &report.per_step_mean_epe {
        Some(e) => (cumulative.iter().copied().zip(e.iter().copied()).collect(), "mean EPE (px)"),
        None => (
            cumulative[1..].iter().copied().zip(report.step_energies.iter().copied()).collect(),
            "step energy",
        ),
    };
    dataio::write_text(&dir.join("energy_scatter.svg"), &scatter_svg(&points, "cumulative energy E", y_label))?;

    let mut report_value = serde_json::to_value(&report).expect("plain report");
    report_value["regime_label"] = json!(report.regime.label());
    dataio::write_json(&dir.join("oscillation.json"), &report_value)?;

    emit(
        out,
        &json!({
            "trajectories": trajectories.len(),
            "steps": steps,
            "energy": report.energy,
            "regime": report.regime.label(),
            "window_spread": report.window_spread,
            "radius_drift": report.radius_drift,
            "stationary_radius": report.stationary_radius,
        }),
    )?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn grid_rows() {
        let csv = energy_grid_csv(&[0.5], &[5]).unwrap();
        assert_eq!(csv, "delta,steps,energy\n0.5,5,1.9375\n");
        let csv = energy_grid_csv(&[1.0], &[10]).unwrap();
        assert!(csv.ends_with("1,10,10.0000\n"));
        assert!(energy_grid_csv(&[0.0], &[5]).is_err());
        assert!(energy_grid_csv(&[0.5], &[0]).is_err());
        assert!(energy_grid_csv(&[], &[5]).is_err());
    }

    #[test]
    fn bad_grid_exit_code() {
        let mut buf = Vec::new();
        let code = run_to(["label-align", "analyze", "--grid", "--delta", "-1", "--steps", "5"], &mut buf);
        assert_eq!(code, EXIT_USAGE);
        assert_eq!(run_to(["label-align", "synth", "--bogus"], &mut buf), EXIT_USAGE);
    }

    #[test]
    fn merge_overlays_nested_objects() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": 3});
        merge(&mut base, json!({"a": {"c": 5}, "e": 6}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 5}, "d": 3, "e": 6}));
    }

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"schedule": {"steps": 9}, "gamma": 0.5, "predictor": {"kind": "oracle"}}"#).unwrap();
        let args = AlignArgs {
            config: Some(path.clone()),
            dataset: Some("ds".into()),
            steps: Some(3),
            ..Default::default()
        };
        let cfg = args.run_config().unwrap();
        assert_eq!(cfg.schedule.steps, 3);
        assert_eq!(cfg.schedule.delta, 1.0);
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.predictor.kind, PredictorKind::Oracle);
        assert_eq!(cfg.outputs.predictions, Some(PathBuf::from("ds/predictions.json")));

        std::fs::write(&path, r#"{"schedul": {}}"#).unwrap();
        let args = AlignArgs {
            config: Some(path),
            ..Default::default()
        };
        assert!(matches!(args.run_config(), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::IdMismatch("x".into())), EXIT_MISMATCH);
        assert_eq!(exit_code(&Error::RejectedRecords(vec![])), EXIT_MISMATCH);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), EXIT_IO);
        assert_eq!(exit_code(&Error::InvalidParameter("x".into())), EXIT_USAGE);
    }
}
