//! The `mpsuq` command line.
//!
//! Exit codes: 0 success, 2 usage, 3 validation, 4 I/O, 5 numeric.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::calibration::{calibrate_dir, reliability_csv, CalibrationError, UceRecord};
use crate::ensemble::{
    infer_with_weights, load_checkpoints, load_ensemble_spec, write_output, EnsembleError,
    EnsembleOutput, InferenceIndex, StdReduction, INFERENCE_FORMAT_VERSION,
};
use crate::gridmaps::{GridError, NpyError, ViolationKind};
use crate::schedule::{emit_schedule_csv, sampling_plan, ScheduleError, ScheduleParams};
use crate::segmetrics::{evaluate, EvalConfig, Hd95Mode, MetricsError};
use crate::toytrain::synth::sample_name;
use crate::toytrain::{
    generate_dataset, load_dataset, train, write_dataset, LossWeights, RunManifest, Split,
    SyntheticDatasetConfig, SyntheticImage, TrainConfig, TrainError,
};

pub const THREADS_ENV: &str = "MPSUQ_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(name = "mpsuq", version, about = "Checkpoint-ensemble uncertainty for segmentation")]
pub struct Cli {
    /// Worker threads; falls back to MPSUQ_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the run record instead of the default.
    #[arg(long, global = true)]
    pub run_json: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Generate the synthetic dataset.
    Synth(SynthArgs),
    /// Print the learning-rate schedule (and optionally the sampling plan).
    Schedule(ScheduleCmdArgs),
    /// Train and keep the planned checkpoints.
    Train(TrainArgs),
    /// Run the checkpoint ensemble and write mean, mask and uncertainty maps.
    Infer(InferArgs),
    /// Segmentation metrics of predicted masks against ground truth.
    Eval(EvalArgs),
    /// Reliability tables and UCE for both uncertainty measures.
    Calibrate(CalibrateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Schedule(_) => "schedule",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Calibrate(_) => "calibrate",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 3)]
    pub cycles: usize,
    #[arg(long, default_value_t = 60)]
    pub cycle_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr_max: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 0.8)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.9)]
    pub power: f64,
}

impl ScheduleArgs {
    fn params(&self) -> Result<ScheduleParams, ScheduleError> {
        ScheduleParams::new(
            self.lr_max,
            self.lr_min,
            self.gamma,
            self.power,
            self.cycle_len,
            self.cycles,
        )
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 20)]
    pub sample_window: usize,
    #[arg(long, default_value_t = 4)]
    pub sample_stride: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 40)]
    pub n_train: usize,
    #[arg(long, default_value_t = 10)]
    pub n_val: usize,
    #[arg(long, default_value_t = 10)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ScheduleCmdArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Schedule CSV destination, `-` for stdout.
    #[arg(long, default_value = "-")]
    pub csv: String,
    /// Also write the sampling plan as JSON, `-` for stdout.
    #[arg(long)]
    pub plan: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_ce: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_dice: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    /// Training run directory holding `manifest.json`.
    #[arg(long, requires = "data", conflicts_with = "ensemble")]
    pub run: Option<PathBuf>,
    /// Dataset directory to run on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// External `ensemble.json` instead of a training run.
    #[arg(long, required_unless_present = "run")]
    pub ensemble: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "class-mean")]
    pub std_reduction: StdReductionArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdReductionArg {
    ClassMean,
    ClassMax,
    PredictedClass,
}

impl From<StdReductionArg> for StdReduction {
    fn from(a: StdReductionArg) -> Self {
        match a {
            StdReductionArg::ClassMean => StdReduction::ClassMean,
            StdReductionArg::ClassMax => StdReduction::ClassMax,
            StdReductionArg::PredictedClass => StdReduction::PredictedClass,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hd95ModeArg {
    Pooled,
    MaxOfDirected,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Predicted masks: inference output, dataset or flat directory.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory for `metrics.json`, `-` prints it to stdout.
    #[arg(long)]
    pub out: String,
    /// Classes averaged into the mean metrics.
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub classes: Vec<u8>,
    #[arg(long, default_value_t = 3)]
    pub num_classes: usize,
    #[arg(long, value_enum, default_value = "pooled")]
    pub hd95_mode: Hd95ModeArg,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Inference output directory.
    #[arg(long)]
    pub infer: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory for the reliability CSVs and `uce.json`; `-` prints
    /// `uce.json` to stdout only.
    #[arg(long)]
    pub out: String,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Validation,
    Io,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Validation => 3,
            ErrorKind::Io => 4,
            ErrorKind::Numeric => 5,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Validation => "validation",
            ErrorKind::Io => "io",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl std::fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {e}", path.display()))
    }
}

fn npy_kind(e: &NpyError) -> ErrorKind {
    match e {
        NpyError::Io { .. } => ErrorKind::Io,
        _ => ErrorKind::Validation,
    }
}

fn grid_kind(e: &GridError) -> ErrorKind {
    match e {
        GridError::Io { .. } => ErrorKind::Io,
        GridError::Npy(n) => npy_kind(n),
        GridError::Probability(v) if matches!(v.kind, ViolationKind::NonFinite { .. }) => {
            ErrorKind::Numeric
        }
        _ => ErrorKind::Validation,
    }
}

fn train_kind(e: &TrainError) -> ErrorKind {
    match e {
        TrainError::Io { .. } => ErrorKind::Io,
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteWeights { .. } => ErrorKind::Numeric,
        TrainError::Grid(g) => grid_kind(g),
        TrainError::Npy(n) => npy_kind(n),
        _ => ErrorKind::Validation,
    }
}

fn ensemble_kind(e: &EnsembleError) -> ErrorKind {
    match e {
        EnsembleError::Io { .. } | EnsembleError::MissingCheckpoint(_) => ErrorKind::Io,
        EnsembleError::Grid(g) => grid_kind(g),
        EnsembleError::Npy(n) => npy_kind(n),
        EnsembleError::Train(t) => train_kind(t),
        _ => ErrorKind::Validation,
    }
}

fn metrics_kind(e: &MetricsError) -> ErrorKind {
    match e {
        MetricsError::Io { .. } => ErrorKind::Io,
        MetricsError::Grid(g) => grid_kind(g),
        _ => ErrorKind::Validation,
    }
}

impl From<NpyError> for CliError {
    fn from(e: NpyError) -> Self {
        Self::new(npy_kind(&e), e)
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        Self::new(grid_kind(&e), e)
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        Self::new(ErrorKind::Validation, e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::new(train_kind(&e), e)
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        Self::new(ensemble_kind(&e), e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::new(metrics_kind(&e), e)
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        let kind = match &e {
            CalibrationError::Grid(g) => grid_kind(g),
            CalibrationError::Metrics(m) => metrics_kind(m),
            CalibrationError::Ensemble(x) => ensemble_kind(x),
            _ => ErrorKind::Validation,
        };
        Self::new(kind, e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ErrorKind::Validation, e)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes to stdout for `-`, else to the file.
fn emit(target: &str, contents: &str) -> Result<(), CliError> {
    if target == "-" {
        std::io::stdout()
            .write_all(contents.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e))
    } else {
        write_file(Path::new(target), contents)
    }
}

/// Default `run.json` location: the stage's output directory, or the
/// current directory when output goes to stdout.
fn run_json_dir(command: &Command) -> PathBuf {
    let dir_of = |target: &str| -> PathBuf {
        if target == "-" {
            PathBuf::from(".")
        } else {
            PathBuf::from(target)
        }
    };
    match command {
        Command::Synth(a) => a.out.clone(),
        Command::Train(a) => a.out.clone(),
        Command::Infer(a) => a.out.clone(),
        Command::Eval(a) => dir_of(&a.out),
        Command::Calibrate(a) => dir_of(&a.out),
        Command::Schedule(a) => match Path::new(&a.csv).parent() {
            Some(p) if a.csv != "-" && !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        },
    }
}

fn write_run_json(cli: &Cli, threads: usize) -> Result<(), CliError> {
    let path = match &cli.run_json {
        Some(p) => p.clone(),
        None => run_json_dir(&cli.command).join("run.json"),
    };
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let record = json!({
        "tool": "mpsuq",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "config": &cli.command,
        "threads": threads,
        "timestamp_unix": timestamp,
    });
    write_file(&path, &(serde_json::to_string_pretty(&record)? + "\n"))
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let config = SyntheticDatasetConfig {
        image_size: a.image_size,
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        noise_std: a.noise_std,
        seed: a.seed,
        ..SyntheticDatasetConfig::default()
    };
    let dataset = generate_dataset(&config)?;
    let index = write_dataset(&dataset, &a.out)?;
    eprintln!("wrote {} images to {} (digest {})", config.total(), a.out.display(), index.digest);
    Ok(())
}

fn cmd_schedule(a: &ScheduleCmdArgs) -> Result<(), CliError> {
    let params = a.schedule.params()?;
    emit(&a.csv, &emit_schedule_csv(&params))?;
    if let Some(target) = &a.plan {
        let plan = sampling_plan(&params, a.sampling.sample_window, a.sampling.sample_stride)?;
        emit(target, &(serde_json::to_string_pretty(&plan)? + "\n"))?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let loss_weights = LossWeights {
        ce: a.lambda_ce,
        dice: a.lambda_dice,
    };
    loss_weights.validate()?;
    let config = TrainConfig {
        dataset_dir: a.data.clone(),
        out_dir: a.out.clone(),
        schedule: a.schedule.params()?,
        window: a.sampling.sample_window,
        stride: a.sampling.sample_stride,
        loss_weights,
        momentum: a.momentum,
        seed: a.seed,
    };
    let outcome = train(&config)?;
    let last = outcome.history.last().map(|h| h.loss.total).unwrap_or(f64::NAN);
    eprintln!(
        "trained {} epochs, kept {} checkpoints, final loss {last:.6}",
        outcome.history.len(),
        outcome.manifest.checkpoints.len()
    );
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<(), CliError> {
    let reduction = StdReduction::from(a.std_reduction);
    let (names, outputs, num_classes, gt) = if let Some(spec) = &a.ensemble {
        let ext = load_ensemble_spec(spec)?;
        let outputs = ext
            .per_image
            .iter()
            .map(|members| EnsembleOutput::from_members(members, reduction))
            .collect::<Result<Vec<_>, _>>()?;
        let names: Vec<String> = (0..outputs.len()).map(sample_name).collect();
        (names, outputs, ext.spec.num_classes, ext.gt)
    } else {
        let run = a.run.as_ref().expect("clap enforces --run or --ensemble");
        let data = a.data.as_ref().expect("clap enforces --data with --run");
        let split: Split = a
            .split
            .parse()
            .map_err(|e| CliError::new(ErrorKind::Usage, e))?;
        let manifest = RunManifest::load(run)?;
        let checkpoints = load_checkpoints(&manifest, run)?;
        let (index, items) = load_dataset(data)?;
        if index.num_classes != manifest.num_classes {
            return Err(CliError::new(
                ErrorKind::Validation,
                format!(
                    "dataset has {} classes, run has {}",
                    index.num_classes, manifest.num_classes
                ),
            ));
        }
        let ids = index.splits.get(split);
        let images: Vec<SyntheticImage> = ids.iter().map(|&i| items[i].0.clone()).collect();
        let outputs = infer_with_weights(&checkpoints, &images, reduction)?;
        let names = ids.iter().map(|&i| sample_name(i)).collect();
        (names, outputs, manifest.num_classes, Vec::new())
    };
    create_dir(&a.out)?;
    for (name, out) in names.iter().zip(&outputs) {
        write_output(&a.out, name, out)?;
    }
    if !gt.is_empty() {
        let gt_dir = a.out.join("gt");
        create_dir(&gt_dir)?;
        for (name, mask) in names.iter().zip(&gt) {
            mask.save(gt_dir.join(format!("{name}.npy")))
                .map_err(|e| CliError::new(grid_kind(&e), e))?;
        }
    }
    InferenceIndex {
        format_version: INFERENCE_FORMAT_VERSION,
        num_classes,
        member_count: outputs.first().map_or(0, |o| o.member_count),
        std_reduction: reduction,
        images: names,
    }
    .save(&a.out)?;
    eprintln!("wrote ensemble outputs for {} images", outputs.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let config = EvalConfig {
        classes: a.classes.clone(),
        num_classes: a.num_classes,
        hd95_mode: match a.hd95_mode {
            Hd95ModeArg::Pooled => Hd95Mode::Pooled,
            Hd95ModeArg::MaxOfDirected => Hd95Mode::MaxOfDirected,
        },
    };
    let report = evaluate(&a.pred, &a.gt, &config)?;
    let json = report.to_json()?;
    if a.out == "-" {
        emit("-", &json)
    } else {
        write_file(&Path::new(&a.out).join("metrics.json"), &json)
    }
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<(), CliError> {
    let tables = calibrate_dir(&a.infer, &a.gt, a.bins)?;
    let records = tables
        .iter()
        .map(UceRecord::from_table)
        .collect::<Result<Vec<_>, _>>()?;
    let json = serde_json::to_string_pretty(&records)? + "\n";
    if a.out == "-" {
        return emit("-", &json);
    }
    let out = Path::new(&a.out);
    for t in &tables {
        write_file(
            &out.join(format!("reliability_{}.csv", t.measure.name())),
            &reliability_csv(t),
        )?;
    }
    write_file(&out.join("uce.json"), &json)
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                CliError::new(ErrorKind::Usage, format!("{THREADS_ENV}='{v}' is not a count"))
            })?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(CliError::new(ErrorKind::Usage, "thread count must be >= 1"));
    }
    Ok(n)
}

/// Parses and executes one command line, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let report = json!({"error": {"kind": e.kind.name(), "message": e.message}});
            eprintln!("{report}");
            e.kind.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let threads = resolve_threads(cli.threads)?;
    let pool = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| CliError::new(ErrorKind::Usage, e))?;
    let used = pool.current_num_threads();
    pool.install(|| dispatch(&cli.command))?;
    write_run_json(cli, used)
}
