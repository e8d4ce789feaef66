//! Command-line front end.
//!
//! Every option can also come from a `--config` file of `key=value` lines
//! (keys are the long option names). A flag on the command line beats the
//! file, which beats the built-in default.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use crate::dataio::{load_sequence, synthesize, window_dataset, PathType, SyntheticConfig, WindowedDataset};
use crate::metrics::{evaluate, write_report, DEFAULT_RTE_INTERVAL};
use crate::odometry::{pdr_track, PdrConfig, Trajectory};
use crate::reconstruct::reconstruct;
use crate::tensor::{BackwardFault, GradCheckOptions, OpKind};
use crate::training::{fit_with_progress, gradcheck_network, TrainConfig};
use crate::velonet::{CbamPlacement, VeloNet, VeloNetConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "velonet", version, about = "Deep inertial odometry: synthesize, train, reconstruct, evaluate")]
pub struct Cli {
    /// Seed for every random draw (synthesis noise, initialization, shuffling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// File of key=value lines supplying defaults for any long option.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic walk as a sequence CSV.
    Synth(SynthArgs),
    /// Train a network on sequence CSVs.
    Train(TrainArgs),
    /// Integrate network velocities over a sequence into a trajectory CSV.
    Reconstruct(ReconstructArgs),
    /// Score a predicted trajectory against ground truth.
    Eval(EvalArgs),
    /// Step-and-heading dead reckoning baseline.
    Pdr(PdrArgs),
    /// Check network gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// line, circle or figure_sine.
    #[arg(long, value_parser = parse_value::<PathType>)]
    pub path: Option<PathType>,
    #[arg(long)]
    pub speed: Option<f64>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub noise_accel: Option<f64>,
    #[arg(long)]
    pub noise_gyro: Option<f64>,
    #[arg(long)]
    pub heading: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub clockwise: Option<bool>,
    #[arg(long)]
    pub step_frequency: Option<f64>,
    #[arg(long)]
    pub bounce: Option<f64>,
    #[arg(long)]
    pub surge: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct ArchArgs {
    #[arg(long)]
    pub window_n: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Blocks per layer, e.g. 3,4,6,3.
    #[arg(long)]
    pub blocks: Option<String>,
    /// p1, p2, p3 or p4.
    #[arg(long, value_parser = parse_value::<CbamPlacement>)]
    pub placement: Option<CbamPlacement>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "train", required = true, num_args = 1..)]
    pub train: Vec<PathBuf>,
    #[arg(long = "val", required = true, num_args = 1..)]
    pub val: Vec<PathBuf>,
    #[arg(long)]
    pub weights_out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Window stride for training data (default: half a window).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub factor: Option<f64>,
    /// Random yaw augmentation.
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write ground truth at the reconstructed timestamps.
    #[arg(long)]
    pub gt_out: Option<PathBuf>,
    /// Overlapping windows at this stride, averaged per sample.
    #[arg(long)]
    pub overlap_stride: Option<usize>,
    #[command(flatten)]
    pub arch: ArchArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// RTE interval in seconds.
    #[arg(long)]
    pub interval: Option<f64>,
    /// Sequence id in the report (default: ground-truth file stem).
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct PdrArgs {
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub step_length: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_interval: Option<f64>,
    #[arg(long)]
    pub smoothing: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Architecture; defaults to the tiny network (width 8, one block per layer, N = 64).
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Number of randomly chosen parameters to check.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Scale the backward rule of one primitive (conv1d, batchnorm, maxpool,
    /// matmul, relu, sigmoid, add, mul, mean, max, concat, narrow).
    #[arg(long)]
    pub corrupt: Option<String>,
}

const KNOWN_KEYS: &[&str] = &[
    "seed", "path", "speed", "duration", "rate", "noise-accel", "noise-gyro", "heading", "radius", "clockwise",
    "step-frequency", "bounce", "surge", "window-n", "base-width", "blocks", "placement", "dropout", "stride", "lr",
    "batch", "epochs", "patience", "factor", "augment", "overlap-stride", "interval", "step-length", "threshold",
    "min-interval", "smoothing", "samples", "tolerance", "corrupt",
];

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn parse_value<T: FromStr<Err = crate::Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse::<T>().map_err(|e| match e {
        crate::Error::Contract(m) => m,
        other => other.to_string(),
    })
}

/// Config-file values with command-line precedence.
struct Settings {
    file: HashMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut file = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("{}:{}: expected key=value, got {raw:?}", path.display(), i + 1))
                })?;
                let key = k.trim().replace('_', "-");
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    return Err(CliError::Usage(format!("{}:{}: unknown key {key:?}", path.display(), i + 1)));
                }
                file.insert(key, v.trim().to_string());
            }
        }
        Ok(Settings { file })
    }

    fn get<T>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => raw.parse::<T>().map_err(|e| CliError::Usage(format!("config key {key}: {e}"))),
            None => Ok(default),
        }
    }

    fn get_opt<T>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|raw| raw.parse::<T>().map_err(|e| CliError::Usage(format!("config key {key}: {e}"))))
            .transpose()
    }

    fn arch(&self, a: &ArchArgs, defaults: &VeloNetConfig, seed: u64) -> CliResult<VeloNetConfig> {
        let blocks_default = defaults.layer_blocks.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let blocks_raw = self.get(a.blocks.clone(), "blocks", blocks_default)?;
        let layer_blocks = blocks_raw
            .split(',')
            .map(|b| b.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| CliError::Usage(format!("blocks: expected comma-separated counts, got {blocks_raw:?}")))?;
        Ok(VeloNetConfig {
            window_n: self.get(a.window_n, "window-n", defaults.window_n)?,
            in_channels: defaults.in_channels,
            layer_blocks,
            base_width: self.get(a.base_width, "base-width", defaults.base_width)?,
            cbam_placement: self.get(a.placement, "placement", defaults.cbam_placement)?,
            dropout_rate: self.get(a.dropout, "dropout", defaults.dropout_rate)?,
            rng_seed: seed,
        })
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: Cli) -> CliResult<i32> {
    let settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.get(cli.seed, "seed", 0u64)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&settings, seed, a),
        Command::Train(a) => cmd_train(&settings, seed, a),
        Command::Reconstruct(a) => cmd_reconstruct(&settings, seed, a),
        Command::Eval(a) => cmd_eval(&settings, a),
        Command::Pdr(a) => cmd_pdr(&settings, a),
        Command::Gradcheck(a) => cmd_gradcheck(&settings, seed, a),
    }
}

fn cmd_synth(s: &Settings, seed: u64, a: SynthArgs) -> CliResult<i32> {
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        path_type: s.get(a.path, "path", d.path_type)?,
        speed: s.get(a.speed, "speed", d.speed)?,
        duration: s.get(a.duration, "duration", d.duration)?,
        sample_rate: s.get(a.rate, "rate", d.sample_rate)?,
        noise_std_accel: s.get(a.noise_accel, "noise-accel", d.noise_std_accel)?,
        noise_std_gyro: s.get(a.noise_gyro, "noise-gyro", d.noise_std_gyro)?,
        rng_seed: seed,
        id: a.out.file_stem().map_or(d.id.clone(), |s| s.to_string_lossy().into_owned()),
        heading: s.get(a.heading, "heading", d.heading)?,
        origin: d.origin,
        radius: s.get(a.radius, "radius", d.radius)?,
        clockwise: s.get(a.clockwise, "clockwise", d.clockwise)?,
        sine_amplitude: d.sine_amplitude,
        sine_wavelength: d.sine_wavelength,
        step_frequency: s.get(a.step_frequency, "step-frequency", d.step_frequency)?,
        bounce_amplitude: s.get(a.bounce, "bounce", d.bounce_amplitude)?,
        surge_ratio: s.get(a.surge, "surge", d.surge_ratio)?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let synthetic = synthesize(&cfg)?;
    synthetic.record.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(EXIT_OK)
}

fn load_windows(paths: &[PathBuf], window_n: usize, stride: usize) -> anyhow::Result<WindowedDataset> {
    let mut data = WindowedDataset::empty(window_n, stride);
    for p in paths {
        let seq = load_sequence(p).with_context(|| format!("loading {}", p.display()))?;
        let windows = window_dataset(&seq, window_n, stride).with_context(|| format!("windowing {}", p.display()))?;
        data.extend(windows)?;
    }
    Ok(data)
}

fn cmd_train(s: &Settings, seed: u64, a: TrainArgs) -> CliResult<i32> {
    let arch = s.arch(&a.arch, &VeloNetConfig::default(), seed)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: s.get(a.lr, "lr", d.learning_rate)?,
        batch_size: s.get(a.batch, "batch", d.batch_size)?,
        max_epochs: s.get(a.epochs, "epochs", d.max_epochs)?,
        plateau_patience: s.get(a.patience, "patience", d.plateau_patience)?,
        plateau_factor: s.get(a.factor, "factor", d.plateau_factor)?,
        rng_seed: seed,
        augment_yaw: s.get(a.augment, "augment", d.augment_yaw)?,
        ..d
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let stride = s.get(a.stride, "stride", (arch.window_n / 2).max(1))?;
    let train = load_windows(&a.train, arch.window_n, stride)?;
    let val = load_windows(&a.val, arch.window_n, arch.window_n)?;
    let mut net = VeloNet::build(&arch).map_err(|e| CliError::Usage(e.to_string()))?;
    if !a.quiet {
        eprintln!("training on {} windows, validating on {}", train.len(), val.len());
    }
    let quiet = a.quiet;
    let report = fit_with_progress(&mut net, &train, &val, &cfg, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  train {:.6e}  val {:.6e}  lr {:.1e}  {:.1}s",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.wall_clock_s
            );
        }
    })?;
    net.save_weights(&a.weights_out).with_context(|| format!("writing {}", a.weights_out.display()))?;
    let file = std::fs::File::create(&a.report).with_context(|| format!("writing {}", a.report.display()))?;
    report.write_csv(file)?;
    if !quiet {
        eprintln!("best epoch {} with validation loss {:.6e}", report.best_epoch, report.best_val_loss);
    }
    Ok(EXIT_OK)
}

fn cmd_reconstruct(s: &Settings, seed: u64, a: ReconstructArgs) -> CliResult<i32> {
    let arch = s.arch(&a.arch, &VeloNetConfig::default(), seed)?;
    let mut net = VeloNet::load_weights(&a.weights, &arch).with_context(|| format!("loading {}", a.weights.display()))?;
    let seq = load_sequence(&a.sequence).with_context(|| format!("loading {}", a.sequence.display()))?;
    let stride = s.get_opt(a.overlap_stride, "overlap-stride")?;
    let rec = reconstruct(&mut net, &seq, stride)?;
    rec.trajectory.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(gt_out) = &a.gt_out {
        let gt = rec
            .ground_truth(&seq)
            .ok_or_else(|| anyhow!("{} has no ground truth to write", a.sequence.display()))?;
        gt.save(gt_out).with_context(|| format!("writing {}", gt_out.display()))?;
    }
    Ok(EXIT_OK)
}

fn cmd_eval(s: &Settings, a: EvalArgs) -> CliResult<i32> {
    let interval = s.get(a.interval, "interval", DEFAULT_RTE_INTERVAL)?;
    let pred = Trajectory::load(&a.pred).with_context(|| format!("loading {}", a.pred.display()))?;
    let gt = Trajectory::load(&a.gt).with_context(|| format!("loading {}", a.gt.display()))?;
    let result = evaluate(&pred, &gt, interval)?;
    let id = a.id.unwrap_or_else(|| a.gt.file_stem().map_or("sequence".into(), |s| s.to_string_lossy().into_owned()));
    let file = std::fs::File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    write_report(file, &[(id.clone(), result.clone())])?;
    println!("{id}: ATE {:.4} m, RTE {:.4} m over {} points", result.ate, result.rte, result.n);
    Ok(EXIT_OK)
}

fn cmd_pdr(s: &Settings, a: PdrArgs) -> CliResult<i32> {
    let d = PdrConfig::default();
    let cfg = PdrConfig {
        step_length: s.get(a.step_length, "step-length", d.step_length)?,
        accel_peak_threshold: s.get(a.threshold, "threshold", d.accel_peak_threshold)?,
        min_step_interval: s.get(a.min_interval, "min-interval", d.min_step_interval)?,
        smoothing_window: s.get(a.smoothing, "smoothing", d.smoothing_window)?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let seq = load_sequence(&a.sequence).with_context(|| format!("loading {}", a.sequence.display()))?;
    let track = pdr_track(&seq, &cfg)?;
    track.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(EXIT_OK)
}

fn parse_op(name: &str) -> CliResult<OpKind> {
    Ok(match name.trim().to_ascii_lowercase().as_str() {
        "conv1d" | "conv" => OpKind::Conv1d,
        "batchnorm" | "bn" => OpKind::BatchNorm,
        "maxpool" | "maxpool1d" => OpKind::MaxPool1d,
        "matmul" | "linear" => OpKind::MatMul,
        "relu" => OpKind::Relu,
        "sigmoid" => OpKind::Sigmoid,
        "add" => OpKind::Add,
        "mul" => OpKind::Mul,
        "mean" => OpKind::Mean,
        "max" => OpKind::Max,
        "concat" => OpKind::Concat,
        "narrow" => OpKind::Narrow,
        other => return Err(CliError::Usage(format!("cannot corrupt unknown primitive {other:?}"))),
    })
}

fn cmd_gradcheck(s: &Settings, seed: u64, a: GradcheckArgs) -> CliResult<i32> {
    let arch = s.arch(&a.arch, &VeloNetConfig { dropout_rate: 0.0, ..VeloNetConfig::tiny(64) }, seed)?;
    let batch = s.get(a.batch, "batch", 2usize)?;
    let samples = s.get(a.samples, "samples", 10usize)?;
    let tolerance = s.get(a.tolerance, "tolerance", 1e-3)?;
    let fault = match s.get_opt(a.corrupt, "corrupt")? {
        Some(name) => Some(BackwardFault { op: parse_op(&name)?, factor: 1.5 }),
        None => None,
    };
    let net = VeloNet::build(&arch).map_err(|e| CliError::Usage(e.to_string()))?;
    let opts = GradCheckOptions { tolerance, sample: Some((samples, seed)), fault, ..Default::default() };
    let report = gradcheck_network(&net, batch, seed, &opts)?;
    println!("{report}");
    if report.pass {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_RUNTIME)
    }
}
