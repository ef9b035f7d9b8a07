//! The `stada` command line.
//!
//! Option precedence: command-line flag, then `STADA_*` environment
//! variable (global options only), then the `--config` JSON file, then the
//! built-in default. The config file holds global keys at the top level and
//! one object per subcommand, keyed by its name:
//!
//! ```json
//! { "log_level": "warn", "train-style": { "steps": 300, "image_size": 96 } }
//! ```

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::Value;

use crate::augmentor::{self, AugmentPlan, LabeledDataset, Traditional, DEFAULT_ROTATIONS};
use crate::classify::{self, BackboneKind, ClassifierConfig};
use crate::descriptive::{self, DescriptiveRunConfig, Init};
use crate::experiments::{self, GroupBy, Matrix, RunOptions};
use crate::image_tensor;
use crate::losses::LossWeights;
use crate::lossnet::{LossNetConfig, LossNetwork, WeightManifest};
use crate::nn::OptimizerKind;
use crate::trainer::{self, StyleTrainConfig};
use crate::transformnet::{TransformNetConfig, TransformNetwork};
use crate::vgg::Backbone;

#[derive(Parser, Debug)]
#[command(
    name = "stada",
    about = "Style transfer as data augmentation: train style networks, stylize, augment datasets, run classification experiments",
    disable_version_flag = true
)]
pub struct Cli {
    /// JSON config file (global keys plus one section per subcommand).
    #[arg(long, global = true, env = "STADA_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Compute device. Only `cpu` exists in this build.
    #[arg(long, global = true, env = "STADA_DEVICE", default_value = "cpu")]
    pub device: String,
    /// Single worker and fixed timestamps; seeded commands become byte-reproducible.
    #[arg(long, global = true, env = "STADA_DETERMINISM")]
    pub determinism: bool,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "STADA_LOG_LEVEL", default_value = "info")]
    pub log_level: String,
    /// Cache for generated toy datasets and scratch files.
    #[arg(long, global = true, env = "STADA_CACHE_DIR", value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Weight manifest listing the loss-network backbone file.
    #[arg(long, global = true, env = "STADA_WEIGHTS", value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Print the toolkit version and the weight-manifest hash.
    #[arg(short = 'V', long)]
    pub version: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a feed-forward style network on a content corpus.
    TrainStyle(TrainStyleArgs),
    /// Apply a style checkpoint to one image.
    Stylize(StylizeArgs),
    /// Iterative (descriptive) transfer by optimising the pixels of one image.
    Optimize(OptimizeArgs),
    /// Build an augmented copy of a labeled dataset.
    Augment(AugmentArgs),
    /// Stratified train/validation split of a labeled dataset.
    Split(SplitArgs),
    /// Train a classifier and record per-epoch validation accuracy.
    TrainClassifier(TrainClassifierArgs),
    /// Run an experiment matrix, appending to a results ledger.
    RunMatrix(RunMatrixArgs),
    /// Summarise a results ledger as tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct LossWeightArgs {
    /// λc
    #[arg(long, default_value_t = LossWeights::default().lambda_content)]
    pub content_weight: f64,
    /// λs
    #[arg(long, default_value_t = LossWeights::default().lambda_style)]
    pub style_weight: f64,
    /// λTV
    #[arg(long, default_value_t = LossWeights::default().lambda_tv)]
    pub tv_weight: f64,
}

impl LossWeightArgs {
    fn weights(&self) -> Result<LossWeights, CliError> {
        LossWeights::new(self.content_weight, self.style_weight, self.tv_weight).map_err(user)
    }
}

#[derive(Args, Debug)]
pub struct TrainStyleArgs {
    /// Style image.
    #[arg(long)]
    pub style: PathBuf,
    /// Directory of content images.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Style name stored in the checkpoint (default: style file stem).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 256)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// adam or sgd.
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    /// Momentum for sgd.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[command(flatten)]
    pub loss: LossWeightArgs,
    /// Multiplies λc and suffixes the style name (2 turns Wave into Wave2).
    #[arg(long, default_value_t = 1.0)]
    pub content_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Intermediate checkpoint period in steps (0: none).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    #[arg(long, default_value_t = 5)]
    pub residual_blocks: usize,
    #[arg(long, default_value_t = 32)]
    pub base_channels: usize,
    /// Write the loss trace as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Both images are resized to this square size.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1.0)]
    pub step_size: f64,
    #[command(flatten)]
    pub loss: LossWeightArgs,
    /// noise or content.
    #[arg(long, default_value = "noise")]
    pub init: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Labeled dataset: `<root>/<class>/<image>`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Add a horizontally flipped copy of every image.
    #[arg(long)]
    pub flip: bool,
    /// Add rotated copies (see --angles).
    #[arg(long)]
    pub rotate: bool,
    /// Rotation angles in degrees, counterclockwise.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ROTATIONS.to_vec())]
    pub angles: Vec<f64>,
    /// Style checkpoint; repeat for several styles.
    #[arg(long = "style")]
    pub styles: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Receives `train/` and `val/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainClassifierArgs {
    /// Dataset directory or augmentation `manifest.csv`.
    #[arg(long)]
    pub train: PathBuf,
    /// Dataset directory or manifest; originals only.
    #[arg(long)]
    pub val: PathBuf,
    /// Receives config.json, trace.csv and best.ckpt.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// small_cnn, vgg16_like or vgg19_like.
    #[arg(long, default_value = "small_cnn")]
    pub backbone: String,
    /// Freeze backbone features and train the head only.
    #[arg(long)]
    pub pretrained: bool,
    /// Backbone weights for --pretrained.
    #[arg(long)]
    pub pretrained_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub input_size: usize,
    #[arg(long, default_value_t = 8)]
    pub width_divisor: usize,
}

#[derive(Args, Debug)]
pub struct RunMatrixArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub ledger: PathBuf,
    /// Rerun configs already in the ledger; the newest row wins in reports.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Run artifact root (default: `runs/` beside the ledger).
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub ledger: PathBuf,
    /// cell (traditional × style × backbone), style, traditional or backbone.
    #[arg(long, default_value = "cell")]
    pub group_by: String,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Directory for accuracy-vs-epoch plots.
    #[arg(long)]
    pub plots: Option<PathBuf>,
}

/// Exit status classes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input: flags, files, configs. Exit 1.
    #[error("{0}")]
    User(String),
    /// Failure inside a computation. Exit 2.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

/// Resolved global settings.
#[derive(Clone, Debug)]
pub struct GlobalConfig {
    pub device: String,
    pub determinism: bool,
    pub log_level: log::LevelFilter,
    pub cache_dir: PathBuf,
    pub weights: Option<PathBuf>,
}

impl GlobalConfig {
    fn resolve(cli: &Cli) -> Result<Self, CliError> {
        if cli.device != "cpu" {
            return Err(CliError::User(format!(
                "device `{}` is not available; this build runs on `cpu`",
                cli.device
            )));
        }
        let log_level = cli
            .log_level
            .parse()
            .map_err(|_| CliError::User(format!("unknown log level `{}`", cli.log_level)))?;
        let cache_dir = cli.cache_dir.clone().unwrap_or_else(default_cache_dir);
        Ok(GlobalConfig {
            device: cli.device.clone(),
            determinism: cli.determinism,
            log_level,
            cache_dir,
            weights: cli.weights.clone(),
        })
    }

    fn ensure_cache_dir(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.cache_dir)
            .map_err(|e| CliError::User(format!("cache dir {}: {e}", self.cache_dir.display())))
    }

    /// Loss network from the weight manifest's first backbone entry, or
    /// the seeded stand-in when no manifest is configured.
    pub fn loss_network(&self) -> Result<LossNetwork, CliError> {
        let mut cfg = LossNetConfig::default();
        if let Some(m) = &self.weights {
            let manifest = WeightManifest::load(m).map_err(user)?;
            let base = m.parent().unwrap_or(Path::new(""));
            let file = manifest
                .entries
                .iter()
                .map(|e| base.join(&e.path))
                .find(|p| Backbone::load(p).is_ok())
                .ok_or_else(|| {
                    CliError::User(format!("{} lists no loadable backbone", m.display()))
                })?;
            cfg.spec = *Backbone::load(&file).map_err(user)?.spec();
            cfg.weights = Some(file);
            cfg.manifest = Some(m.clone());
        } else {
            log::warn!("no weight manifest configured; using the seeded stand-in backbone");
        }
        cfg.build().map_err(user)
    }
}

fn default_cache_dir() -> PathBuf {
    if let Some(x) = std::env::var_os("XDG_CACHE_HOME") {
        return PathBuf::from(x).join("stada");
    }
    if let Some(h) = std::env::var_os("HOME") {
        return PathBuf::from(h).join(".cache").join("stada");
    }
    PathBuf::from(".stada-cache")
}

/// `--config` from argv or the environment, found before full parsing.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    std::env::var_os("STADA_CONFIG").map(PathBuf::from)
}

fn json_scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Installs config-file values as argument defaults.
fn apply_config(
    mut cmd: clap::Command,
    config: &Value,
    path: &Path,
) -> Result<clap::Command, CliError> {
    let Value::Object(map) = config else {
        return Err(CliError::User(format!(
            "{}: expected a JSON object",
            path.display()
        )));
    };
    fn set(
        cmd: clap::Command,
        key: &str,
        v: &Value,
        path: &Path,
    ) -> Result<clap::Command, CliError> {
        let id = key.replace('-', "_");
        if id == "config" || !cmd.get_arguments().any(|a| a.get_id() == id.as_str()) {
            return Err(CliError::User(format!(
                "{}: unknown key `{key}` for `{}`",
                path.display(),
                cmd.get_name()
            )));
        }
        let values: Vec<String> = match v {
            Value::Array(items) => items.iter().map(json_scalar).collect::<Option<_>>(),
            other => json_scalar(other).map(|s| vec![s]),
        }
        .ok_or_else(|| {
            CliError::User(format!("{}: unsupported value for `{key}`", path.display()))
        })?;
        Ok(cmd.mut_arg(id, |a| a.default_values(values).required(false)))
    }
    for (key, v) in map {
        if cmd.find_subcommand(key).is_some() {
            let Value::Object(section) = v else {
                return Err(CliError::User(format!(
                    "{}: section `{key}` must be an object",
                    path.display()
                )));
            };
            let mut sub = cmd.find_subcommand(key).cloned().expect("checked above");
            for (k, sv) in section {
                sub = set(sub, k, sv, path)?;
            }
            cmd = cmd.mut_subcommand(key, |_| sub);
        } else {
            cmd = set(cmd, key, v, path)?;
        }
    }
    Ok(cmd)
}

fn parse(args: &[OsString]) -> Result<Result<Cli, clap::Error>, CliError> {
    let mut cmd = Cli::command();
    if let Some(path) = config_path(args) {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::User(format!("config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::User(format!("config {}: {e}", path.display())))?;
        cmd = apply_config(cmd, &value, &path)?;
    }
    Ok(cmd
        .try_get_matches_from(args)
        .and_then(|m: ArgMatches| Cli::from_arg_matches(&m)))
}

/// Process entry point.
pub fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    ExitCode::from(run(&args))
}

/// Runs the command line `args` (including the program name) and returns
/// the exit status.
pub fn run(args: &[OsString]) -> u8 {
    let cli = match parse(args) {
        Ok(Ok(cli)) => cli,
        Ok(Err(e)) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let global = match GlobalConfig::resolve(&cli) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(global.log_level)
        .format_timestamp(None)
        .try_init();
    if cli.version {
        println!("stada {}", experiments::TOOLKIT_VERSION);
        match &global.weights {
            Some(m) => match WeightManifest::load(m) {
                Ok(w) => println!("weights manifest {} sha256 {}", m.display(), w.digest()),
                Err(e) => {
                    eprintln!("error: {e}");
                    return 1;
                }
            },
            None => println!("weights manifest: none (seeded stand-in backbone)"),
        }
        return 0;
    }
    let Some(command) = cli.command else {
        let _ = Cli::command().print_help();
        return 1;
    };
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        global.ensure_cache_dir()?;
        dispatch(command, &global)
    }));
    match result {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => {
            eprintln!("error: internal failure (panic)");
            2
        }
    }
}

fn dispatch(command: Command, g: &GlobalConfig) -> Result<(), CliError> {
    match command {
        Command::TrainStyle(a) => train_style(a, g),
        Command::Stylize(a) => stylize(a),
        Command::Optimize(a) => optimize(a, g),
        Command::Augment(a) => augment(a),
        Command::Split(a) => split(a),
        Command::TrainClassifier(a) => train_classifier(a),
        Command::RunMatrix(a) => run_matrix(a, g),
        Command::Report(a) => report(a),
    }
}

fn train_style(a: TrainStyleArgs, g: &GlobalConfig) -> Result<(), CliError> {
    let name = match a.name {
        Some(n) => n,
        None => a
            .style
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| {
                CliError::User(format!(
                    "cannot derive a style name from {}",
                    a.style.display()
                ))
            })?,
    };
    let mut cfg = StyleTrainConfig::new(name, a.style.clone(), a.corpus.clone());
    cfg.weights = a.loss.weights()?;
    cfg.batch_size = a.batch_size;
    cfg.steps = a.steps;
    cfg.learning_rate = a.lr;
    cfg.optimizer = match a.optimizer.as_str() {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd {
            momentum: a.momentum,
        },
        other => {
            return Err(CliError::User(format!(
                "unknown optimizer `{other}` (adam or sgd)"
            )))
        }
    };
    cfg.image_size = a.image_size;
    cfg.seed = a.seed;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.log_every = a.log_every;
    let cfg = trainer::make_variant(&cfg, a.content_scale).map_err(user)?;
    let net_cfg = TransformNetConfig {
        num_residual_blocks: a.residual_blocks,
        base_channels: a.base_channels,
        ..TransformNetConfig::default()
    };
    let loss_net = g.loss_network()?;
    let outcome = trainer::train_style(&cfg, &net_cfg, &loss_net, &a.out).map_err(|e| match e {
        trainer::TrainError::NonFinite { .. } | trainer::TrainError::Validation { .. } => {
            internal(e)
        }
        e => user(e),
    })?;
    if let Some(t) = &a.trace {
        outcome
            .trace
            .save_csv(t)
            .map_err(|e| user(format!("{}: {e}", t.display())))?;
    }
    println!(
        "{}: style `{}`, objective {:.4e} -> {:.4e}",
        a.out.display(),
        cfg.style_name,
        outcome.initial_total,
        outcome.final_running_total
    );
    Ok(())
}

fn stylize(a: StylizeArgs) -> Result<(), CliError> {
    let (net, _) = TransformNetwork::load_checkpoint(&a.ckpt).map_err(user)?;
    let img = image_tensor::load_rgb(&a.input).map_err(user)?;
    net.stylize(&img).save_png(&a.out).map_err(user)?;
    println!("{}", a.out.display());
    Ok(())
}

fn optimize(a: OptimizeArgs, g: &GlobalConfig) -> Result<(), CliError> {
    let init = match a.init.as_str() {
        "noise" => Init::WhiteNoise,
        "content" => Init::ContentCopy,
        other => {
            return Err(CliError::User(format!(
                "unknown init `{other}` (noise or content)"
            )))
        }
    };
    let cfg = DescriptiveRunConfig {
        weights: a.loss.weights()?,
        iterations: a.iterations,
        step_size: a.step_size,
        init,
        seed: a.seed,
        log_every: a.log_every,
    };
    let content = image_tensor::load_rgb_resized(&a.content, a.size, a.size).map_err(user)?;
    let style = image_tensor::load_rgb_resized(&a.style, a.size, a.size).map_err(user)?;
    let net = g.loss_network()?;
    let target = net.compute_style_target(&style, &[]).map_err(user)?;
    let feats = net
        .extract_features(&content, net.content_layers())
        .map_err(user)?;
    let out =
        descriptive::optimize(&content, &target, &feats, &net, &cfg).map_err(|e| match e {
            descriptive::DescriptiveError::NonFinite { .. } => internal(e),
            e => user(e),
        })?;
    out.image.save_png(&a.out).map_err(user)?;
    if let Some(t) = &a.trace {
        out.trace
            .save_csv(t)
            .map_err(|e| user(format!("{}: {e}", t.display())))?;
    }
    println!("{}: best objective {:.4e}", a.out.display(), out.best_total);
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<(), CliError> {
    let (ds, warnings) = augmentor::scan_dataset(&a.dataset).map_err(user)?;
    for w in warnings {
        log::warn!("{w}");
    }
    let mut traditional = Vec::new();
    if a.flip {
        traditional.push(Traditional::FlipHorizontal);
    }
    if a.rotate {
        traditional.push(Traditional::Rotation);
    }
    let plan = AugmentPlan {
        rotation_angles: if a.rotate { a.angles } else { Vec::new() },
        traditional,
        styles: a.styles,
    };
    let m = augmentor::build_augmented(&ds, &plan, &a.out).map_err(user)?;
    println!(
        "{}: {} rows from {} images ({}x)",
        a.out.join(augmentor::MANIFEST_FILE).display(),
        m.rows.len(),
        ds.len(),
        plan.multiplicity()
    );
    Ok(())
}

fn load_labeled(path: &Path) -> Result<LabeledDataset, CliError> {
    if path.is_file() {
        LabeledDataset::from_manifest(path).map_err(user)
    } else {
        let (ds, warnings) = augmentor::scan_dataset(path).map_err(user)?;
        for w in warnings {
            log::warn!("{w}");
        }
        Ok(ds)
    }
}

fn split(a: SplitArgs) -> Result<(), CliError> {
    let ds = load_labeled(&a.dataset)?;
    let (train, val) = classify::split_dataset(&ds, a.fraction, a.seed).map_err(user)?;
    classify::materialize(&train, &a.out.join("train")).map_err(user)?;
    classify::materialize(&val, &a.out.join("val")).map_err(user)?;
    println!(
        "{}: {} train, {} val",
        a.out.display(),
        train.len(),
        val.len()
    );
    Ok(())
}

fn train_classifier(a: TrainClassifierArgs) -> Result<(), CliError> {
    let backbone: BackboneKind = a.backbone.parse().map_err(CliError::User)?;
    let cfg = ClassifierConfig {
        backbone,
        pretrained: a.pretrained,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        input_size: a.input_size,
        width_divisor: a.width_divisor,
        pretrained_weights: a.pretrained_weights,
    };
    let train = load_labeled(&a.train)?;
    let val = load_labeled(&a.val)?;
    let run =
        classify::train_classifier(&train, &val, &cfg, Some(&a.run_dir)).map_err(|e| match e {
            classify::ClassifyError::Diverged { .. } => internal(e),
            e => user(e),
        })?;
    println!(
        "best top-1 {:.4} at epoch {} of {} ({})",
        run.best_val_accuracy,
        run.best_epoch,
        run.per_epoch_val_accuracy.len(),
        a.run_dir.join("best.ckpt").display()
    );
    Ok(())
}

fn run_matrix(a: RunMatrixArgs, g: &GlobalConfig) -> Result<(), CliError> {
    let matrix = Matrix::load(&a.matrix).map_err(user)?;
    let opts = RunOptions {
        cache_dir: g.cache_dir.clone(),
        runs_dir: a.runs_dir,
        force: a.force,
        jobs: a.jobs,
        deterministic: g.determinism,
    };
    let out = experiments::run_matrix(&matrix, &a.ledger, &opts).map_err(user)?;
    println!(
        "{}: {} appended, {} skipped, {} failed",
        a.ledger.display(),
        out.appended.len(),
        out.skipped.len(),
        out.failures.len()
    );
    for (name, e) in &out.failures {
        eprintln!("failed: {name}: {e}");
    }
    if out.succeeded() {
        Ok(())
    } else {
        Err(CliError::User(format!(
            "{} experiment(s) failed",
            out.failures.len()
        )))
    }
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let group_by: GroupBy = a.group_by.parse().map_err(CliError::User)?;
    let records = experiments::read_ledger(&a.ledger).map_err(user)?;
    if records.is_empty() {
        println!("no results");
        return Ok(());
    }
    if let Err(e) = experiments::verify_chain(&a.ledger) {
        log::warn!("{e}");
    }
    let rows = experiments::summarize(&records, group_by);
    print!("{}", experiments::render_table(&rows, group_by));
    if let Some(p) = &a.csv {
        experiments::write_report_csv(p, &rows, group_by).map_err(user)?;
    }
    if let Some(d) = &a.plots {
        experiments::write_plots(d, &rows).map_err(user)?;
    }
    Ok(())
}
