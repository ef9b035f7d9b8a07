//! Declarative experiment matrices, an append-only results ledger with a
//! hash-chain sidecar, and grouped report tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augmentor::{
    build_augmented, scan_dataset, AugmentError, AugmentPlan, LabeledDataset, Traditional,
    DEFAULT_ROTATIONS, MANIFEST_FILE,
};
use crate::classify::{split_dataset, train_classifier, ClassifierConfig, ClassifyError};
use crate::container::{canonical_json, sha256_hex, write_atomic};
use crate::image_tensor::ImageError;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("matrix {path}: {msg}")]
    Matrix { path: PathBuf, msg: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ledger {path}: {msg}")]
    Ledger { path: PathBuf, msg: String },
    #[error("ledger {path}: hash chain broken at row {row}")]
    Chain { path: PathBuf, row: usize },
    #[error("cannot resolve {0}")]
    Unresolved(String),
    #[error("bad dataset reference `{0}`")]
    DatasetRef(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_rotations() -> Vec<f64> {
    DEFAULT_ROTATIONS.to_vec()
}

fn default_fraction() -> f64 {
    0.7
}

/// On-disk matrix: shared defaults plus one entry per experiment. Each
/// entry expands to one [`ExperimentConfig`] per seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixFile {
    #[serde(default)]
    pub description: String,
    /// Directory path (relative to the matrix file) or
    /// `toy:classes=3,per_class=60,size=32,seed=0`.
    pub dataset: String,
    /// Where `<style>.ckpt` files live, relative to the matrix file.
    #[serde(default)]
    pub checkpoints_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_rotations")]
    pub rotation_angles: Vec<f64>,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    /// Classifier settings shared by every entry (partial is fine).
    #[serde(default)]
    pub classifier: Value,
    pub experiments: Vec<MatrixEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub name: String,
    #[serde(default)]
    pub traditional: Vec<Traditional>,
    #[serde(default)]
    pub styles: Vec<String>,
    /// Overrides merged over the matrix-level classifier settings.
    #[serde(default)]
    pub classifier: Value,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

/// One fully specified experiment. Its canonical JSON hashes to the
/// ledger's `config_hash`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset_ref: String,
    pub traditional: Vec<Traditional>,
    pub rotation_angles: Vec<f64>,
    pub styles: Vec<String>,
    pub classifier: ClassifierConfig,
    pub seed: u64,
    pub train_fraction: f64,
}

impl ExperimentConfig {
    pub fn config_hash(&self) -> String {
        sha256_hex(canonical_json(self).as_bytes())
    }

    pub fn traditional_label(&self) -> String {
        crate::augmentor::traditional_label(&self.traditional)
    }

    /// `None`, `Wave`, or concatenated names such as `ScreamWave`.
    pub fn styles_label(&self) -> String {
        styles_label(&self.styles)
    }

    pub fn run_id(&self) -> String {
        let slug: String = self
            .name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        format!("{slug}-s{}-{}", self.seed, &self.config_hash()[..12])
    }
}

pub fn styles_label(styles: &[String]) -> String {
    if styles.is_empty() {
        "None".into()
    } else {
        styles.concat()
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) if !o.is_null() => *b = o.clone(),
        _ => {}
    }
}

/// A parsed matrix with its entries expanded over seeds.
#[derive(Clone, Debug)]
pub struct Matrix {
    pub path: PathBuf,
    pub file: MatrixFile,
    pub configs: Vec<ExperimentConfig>,
}

impl Matrix {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, ExperimentError> {
        let bad = |msg: String| ExperimentError::Matrix {
            path: path.to_path_buf(),
            msg,
        };
        let file: MatrixFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.experiments.is_empty() {
            return Err(bad("no experiments".into()));
        }
        let mut names = HashSet::new();
        let mut configs = Vec::new();
        for e in &file.experiments {
            if !names.insert(e.name.as_str()) {
                return Err(bad(format!("experiment name `{}` is not unique", e.name)));
            }
            let mut cls =
                serde_json::to_value(ClassifierConfig::default()).expect("config serializes");
            merge(&mut cls, &file.classifier);
            merge(&mut cls, &e.classifier);
            let seeds = e.seeds.as_ref().unwrap_or(&file.seeds);
            if seeds.is_empty() {
                return Err(bad(format!("experiment `{}` has no seeds", e.name)));
            }
            for &seed in seeds {
                let mut cls = cls.clone();
                cls["seed"] = seed.into();
                let classifier: ClassifierConfig = serde_json::from_value(cls)
                    .map_err(|err| bad(format!("experiment `{}`: {err}", e.name)))?;
                classifier
                    .validate()
                    .map_err(|err| bad(format!("experiment `{}`: {err}", e.name)))?;
                let mut traditional = e.traditional.clone();
                traditional.sort();
                traditional.dedup();
                let rotation_angles = if traditional.contains(&Traditional::Rotation) {
                    file.rotation_angles.clone()
                } else {
                    Vec::new()
                };
                configs.push(ExperimentConfig {
                    name: e.name.clone(),
                    dataset_ref: file.dataset.clone(),
                    traditional,
                    rotation_angles,
                    styles: e.styles.clone(),
                    classifier,
                    seed,
                    train_fraction: file.train_fraction,
                });
            }
        }
        Ok(Matrix {
            path: path.to_path_buf(),
            file,
            configs,
        })
    }

    /// Directory holding the matrix file; relative paths resolve here.
    pub fn base_dir(&self) -> PathBuf {
        self.path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }

    pub fn checkpoint_path(&self, style: &str) -> PathBuf {
        let dir = self
            .file
            .checkpoints_dir
            .clone()
            .unwrap_or_else(|| "styles".into());
        self.base_dir().join(dir).join(format!("{style}.ckpt"))
    }
}

/// Parameters of a generated toy dataset reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyRef {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl ToyRef {
    pub fn parse(s: &str) -> Result<Option<Self>, ExperimentError> {
        let Some(rest) = s.strip_prefix("toy:") else {
            return Ok(None);
        };
        let mut t = ToyRef {
            classes: 3,
            per_class: 60,
            size: 32,
            seed: 0,
        };
        for kv in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ExperimentError::DatasetRef(s.into()))?;
            let n: u64 = v
                .trim()
                .parse()
                .map_err(|_| ExperimentError::DatasetRef(s.into()))?;
            match k.trim() {
                "classes" => t.classes = n as usize,
                "per_class" => t.per_class = n as usize,
                "size" => t.size = n as usize,
                "seed" => t.seed = n,
                _ => return Err(ExperimentError::DatasetRef(s.into())),
            }
        }
        if t.classes < 2
            || t.classes > crate::toy::TOY_CLASSES.len()
            || t.per_class < 2
            || t.size < 8
        {
            return Err(ExperimentError::DatasetRef(s.into()));
        }
        Ok(Some(t))
    }

    fn dir_name(&self) -> String {
        format!(
            "toy-c{}-n{}-s{}-seed{}",
            self.classes, self.per_class, self.size, self.seed
        )
    }

    /// Generates the dataset under `cache/datasets/` unless already present.
    pub fn materialize(&self, cache_dir: &Path) -> Result<PathBuf, ExperimentError> {
        let dir = cache_dir.join("datasets").join(self.dir_name());
        if dir.join(".complete").exists() {
            return Ok(dir);
        }
        let tmp =
            cache_dir
                .join("datasets")
                .join(format!(".{}.{}", self.dir_name(), std::process::id()));
        let _ = std::fs::remove_dir_all(&tmp);
        crate::toy::write_toy_dataset(&tmp, self.classes, self.per_class, self.size, self.seed)?;
        write_atomic(&tmp.join(".complete"), b"").map_err(io_err(&tmp))?;
        match std::fs::rename(&tmp, &dir) {
            Ok(()) => Ok(dir),
            // another process finished first
            Err(_) if dir.join(".complete").exists() => {
                let _ = std::fs::remove_dir_all(&tmp);
                Ok(dir)
            }
            Err(e) => Err(io_err(&dir)(e)),
        }
    }
}

/// Resolves a dataset reference to a directory.
pub fn resolve_dataset(
    reference: &str,
    base_dir: &Path,
    cache_dir: &Path,
) -> Result<PathBuf, ExperimentError> {
    match ToyRef::parse(reference)? {
        Some(t) => t.materialize(cache_dir),
        None => {
            let p = base_dir.join(reference);
            if p.is_dir() {
                Ok(p)
            } else {
                Err(ExperimentError::Unresolved(format!(
                    "dataset {}",
                    p.display()
                )))
            }
        }
    }
}

/// One ledger row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub name: String,
    pub traditional: String,
    pub styles: String,
    pub backbone: String,
    pub seed: u64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    /// `;`-separated.
    pub per_epoch_val_accuracy: String,
    pub dataset_hash: String,
    pub config_hash: String,
    pub timestamp: String,
    pub toolkit_version: String,
}

impl ResultRecord {
    pub fn per_epoch(&self) -> Vec<f64> {
        self.per_epoch_val_accuracy
            .split(';')
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse().ok())
            .collect()
    }

    fn csv_line(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.serialize(self).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 fields")
    }
}

const LEDGER_HEADER: &str = "name,traditional,styles,backbone,seed,best_val_accuracy,best_epoch,\
per_epoch_val_accuracy,dataset_hash,config_hash,timestamp,toolkit_version\n";

pub fn chain_path(ledger: &Path) -> PathBuf {
    let mut s = ledger.as_os_str().to_owned();
    s.push(".chain");
    PathBuf::from(s)
}

fn lock_path(ledger: &Path) -> PathBuf {
    let mut s = ledger.as_os_str().to_owned();
    s.push(".lock");
    PathBuf::from(s)
}

/// Reads every ledger row. A missing ledger has no rows.
pub fn read_ledger(path: &Path) -> Result<Vec<ResultRecord>, ExperimentError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| ExperimentError::Ledger {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Checks the sidecar chain against the ledger's rows; returns the row count.
pub fn verify_chain(ledger: &Path) -> Result<usize, ExperimentError> {
    let text = match std::fs::read_to_string(ledger) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(io_err(ledger)(e)),
    };
    let cp = chain_path(ledger);
    let chain = std::fs::read_to_string(&cp).map_err(io_err(&cp))?;
    let links: Vec<&str> = chain.lines().collect();
    // rows are single physical lines: fields never contain newlines
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let mut prev = GENESIS.to_string();
    for (i, row) in rows.iter().enumerate() {
        let next = link(&prev, row);
        if links.get(i) != Some(&next.as_str()) {
            return Err(ExperimentError::Chain {
                path: ledger.to_path_buf(),
                row: i + 1,
            });
        }
        prev = next;
    }
    if links.len() != rows.len() {
        return Err(ExperimentError::Chain {
            path: ledger.to_path_buf(),
            row: rows.len() + 1,
        });
    }
    Ok(rows.len())
}

fn link(prev: &str, row: &str) -> String {
    sha256_hex(format!("{prev}\n{row}").as_bytes())
}

static IN_PROCESS: Mutex<()> = Mutex::new(());

/// Appends one row. The ledger and its chain are each replaced atomically,
/// under an exclusive lock on `<ledger>.lock`.
pub fn append_record(ledger: &Path, record: &ResultRecord) -> Result<(), ExperimentError> {
    let _guard = IN_PROCESS.lock().unwrap_or_else(|p| p.into_inner());
    if let Some(dir) = ledger.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let lp = lock_path(ledger);
    let lock: File = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lp)
        .map_err(io_err(&lp))?;
    lock.lock().map_err(io_err(&lp))?;

    let mut text = match std::fs::read_to_string(ledger) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => LEDGER_HEADER.to_string(),
        Err(e) => return Err(io_err(ledger)(e)),
    };
    let cp = chain_path(ledger);
    let mut chain = match std::fs::read_to_string(&cp) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(&cp)(e)),
    };
    let line = record.csv_line();
    let prev = chain.lines().last().unwrap_or(GENESIS).to_string();
    chain.push_str(&link(&prev, line.trim_end_matches('\n')));
    chain.push('\n');
    text.push_str(&line);
    write_atomic(ledger, text.as_bytes()).map_err(io_err(ledger))?;
    write_atomic(&cp, chain.as_bytes()).map_err(io_err(&cp))?;
    lock.unlock().map_err(io_err(&lp))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub cache_dir: PathBuf,
    /// Defaults to `runs/` next to the ledger.
    pub runs_dir: Option<PathBuf>,
    pub force: bool,
    pub jobs: usize,
    /// Single worker and a fixed timestamp, so reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            cache_dir: PathBuf::from(".stada-cache"),
            runs_dir: None,
            force: false,
            jobs: 1,
            deterministic: false,
        }
    }
}

#[derive(Debug, Default)]
pub struct MatrixOutcome {
    pub appended: Vec<ResultRecord>,
    /// Names of configs already present in the ledger.
    pub skipped: Vec<String>,
    pub failures: Vec<(String, ExperimentError)>,
}

impl MatrixOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn timestamp(deterministic: bool) -> String {
    let t = if deterministic {
        SystemTime::UNIX_EPOCH
    } else {
        SystemTime::now()
    };
    humantime::format_rfc3339_seconds(t).to_string()
}

/// Runs a single experiment and returns its ledger row (not yet appended).
pub fn run_experiment(
    matrix: &Matrix,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    runs_dir: &Path,
) -> Result<ResultRecord, ExperimentError> {
    let root = resolve_dataset(&cfg.dataset_ref, &matrix.base_dir(), &opts.cache_dir)?;
    let (dataset, warnings) = scan_dataset(&root)?;
    for w in warnings {
        log::warn!("{w}");
    }
    let dataset_hash = dataset.content_hash()?;
    let styles: Vec<PathBuf> = cfg
        .styles
        .iter()
        .map(|s| matrix.checkpoint_path(s))
        .collect();
    if let Some(p) = styles.iter().find(|p| !p.is_file()) {
        return Err(ExperimentError::Unresolved(format!(
            "style checkpoint {}",
            p.display()
        )));
    }
    let (train, val) = split_dataset(&dataset, cfg.train_fraction, cfg.seed)?;
    let plan = AugmentPlan {
        traditional: cfg.traditional.clone(),
        rotation_angles: cfg.rotation_angles.clone(),
        styles,
    };
    let work = opts.cache_dir.join("work").join(cfg.run_id());
    let train: LabeledDataset = if plan.multiplicity() == 1 {
        train
    } else {
        let _ = std::fs::remove_dir_all(&work);
        build_augmented(&train, &plan, &work)?;
        LabeledDataset::from_manifest(&work.join(MANIFEST_FILE))?
    };
    let run_dir = runs_dir.join(cfg.run_id());
    let run = train_classifier(&train, &val, &cfg.classifier, Some(&run_dir));
    let _ = std::fs::remove_dir_all(&work);
    let run = run?;
    Ok(ResultRecord {
        name: cfg.name.clone(),
        traditional: cfg.traditional_label(),
        styles: cfg.styles_label(),
        backbone: cfg.classifier.backbone.label().into(),
        seed: cfg.seed,
        best_val_accuracy: run.best_val_accuracy,
        best_epoch: run.best_epoch,
        per_epoch_val_accuracy: run
            .per_epoch_val_accuracy
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(";"),
        dataset_hash,
        config_hash: cfg.config_hash(),
        timestamp: timestamp(opts.deterministic),
        toolkit_version: TOOLKIT_VERSION.into(),
    })
}

/// Runs every config not yet in the ledger (all of them with `force`),
/// appending one row per success. Failures are collected and the rest of
/// the matrix still runs.
pub fn run_matrix(
    matrix: &Matrix,
    ledger: &Path,
    opts: &RunOptions,
) -> Result<MatrixOutcome, ExperimentError> {
    let done: HashSet<(String, String)> = read_ledger(ledger)?
        .into_iter()
        .map(|r| (r.name, r.config_hash))
        .collect();
    let mut outcome = MatrixOutcome::default();
    let mut todo = Vec::new();
    for cfg in &matrix.configs {
        if !opts.force && done.contains(&(cfg.name.clone(), cfg.config_hash())) {
            outcome
                .skipped
                .push(format!("{} (seed {})", cfg.name, cfg.seed));
        } else {
            todo.push(cfg);
        }
    }
    let runs_dir = opts.runs_dir.clone().unwrap_or_else(|| {
        ledger
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
            .join("runs")
    });
    let jobs = if opts.deterministic {
        1
    } else {
        opts.jobs.max(1)
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<ResultRecord, ExperimentError>)>> =
        Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(todo.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = todo.get(i) else { break };
                log::info!("running {} (seed {})", cfg.name, cfg.seed);
                let r = run_experiment(matrix, cfg, opts, &runs_dir)
                    .and_then(|rec| append_record(ledger, &rec).map(|_| rec));
                if let Err(e) = &r {
                    log::error!("{} (seed {}) failed: {e}", cfg.name, cfg.seed);
                }
                results
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap_or_else(|p| p.into_inner());
    results.sort_by_key(|(i, _)| *i);
    for (i, r) in results {
        match r {
            Ok(rec) => outcome.appended.push(rec),
            Err(e) => outcome
                .failures
                .push((format!("{} (seed {})", todo[i].name, todo[i].seed), e)),
        }
    }
    Ok(outcome)
}

/// Table grouping for [`summarize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GroupBy {
    /// Traditional method × style × backbone, the shape of the result tables.
    #[default]
    Cell,
    Style,
    Traditional,
    Backbone,
}

impl std::str::FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cell" => Ok(GroupBy::Cell),
            "style" => Ok(GroupBy::Style),
            "traditional" => Ok(GroupBy::Traditional),
            "backbone" => Ok(GroupBy::Backbone),
            _ => Err(format!(
                "unknown grouping `{s}` (expected cell, style, traditional or backbone)"
            )),
        }
    }
}

impl GroupBy {
    pub fn columns(&self) -> Vec<&'static str> {
        match self {
            GroupBy::Cell => vec!["Traditional Method", "Style", "Backbone"],
            GroupBy::Style => vec!["Style"],
            GroupBy::Traditional => vec!["Traditional Method"],
            GroupBy::Backbone => vec!["Backbone"],
        }
    }

    fn key(&self, r: &ResultRecord) -> Vec<String> {
        match self {
            GroupBy::Cell => vec![r.traditional.clone(), r.styles.clone(), r.backbone.clone()],
            GroupBy::Style => vec![r.styles.clone()],
            GroupBy::Traditional => vec![r.traditional.clone()],
            GroupBy::Backbone => vec![r.backbone.clone()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub key: Vec<String>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub n: usize,
    pub max: f64,
    /// Mean validation accuracy per epoch over the group's runs.
    pub curve: Vec<f64>,
}

/// Keeps the last row for each (name, config hash).
pub fn latest_records(records: &[ResultRecord]) -> Vec<ResultRecord> {
    let mut last: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        last.insert((r.name.clone(), r.config_hash.clone()), i);
    }
    let mut keep: Vec<usize> = last.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| records[i].clone()).collect()
}

/// Groups rows and sorts groups by mean accuracy, best first.
pub fn summarize(records: &[ResultRecord], group_by: GroupBy) -> Vec<ReportRow> {
    let mut groups: BTreeMap<Vec<String>, Vec<&ResultRecord>> = BTreeMap::new();
    let latest = latest_records(records);
    for r in &latest {
        groups.entry(group_by.key(r)).or_default().push(r);
    }
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|(key, rs)| {
            let accs: Vec<f64> = rs.iter().map(|r| r.best_val_accuracy).collect();
            let n = accs.len();
            let mean = accs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let curves: Vec<Vec<f64>> = rs.iter().map(|r| r.per_epoch()).collect();
            let epochs = curves.iter().map(Vec::len).max().unwrap_or(0);
            let curve = (0..epochs)
                .map(|e| {
                    let v: Vec<f64> = curves.iter().filter_map(|c| c.get(e).copied()).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            ReportRow {
                key,
                mean,
                std,
                n,
                max: accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                curve,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.key.cmp(&b.key)));
    rows
}

/// Aligned plain-text table.
pub fn render_table(rows: &[ReportRow], group_by: GroupBy) -> String {
    if rows.is_empty() {
        return "no results\n".into();
    }
    let mut header: Vec<String> = group_by.columns().iter().map(|s| s.to_string()).collect();
    header.extend(["Result (mean)", "Std", "Max", "Seeds"].map(String::from));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = r.key.clone();
            cells.push(format!("{:.4}", r.mean));
            cells.push(format!("{:.4}", r.std));
            cells.push(format!("{:.4}", r.max));
            cells.push(r.n.to_string());
            cells
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|row| row[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let nkey = group_by.columns().len();
    let fmt_row = |cells: &[String]| {
        let mut line = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            if c < nkey {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "{cell:>w$}", w = widths[c]);
            }
        }
        line.trim_end().to_string() + "\n"
    };
    let mut out = fmt_row(&header);
    let rule = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in &body {
        out.push_str(&fmt_row(row));
    }
    out.push_str("Result is the mean best validation accuracy over seeds; Std is the sample standard deviation.\n");
    out
}

pub fn write_report_csv(
    path: &Path,
    rows: &[ReportRow],
    group_by: GroupBy,
) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = group_by
        .columns()
        .iter()
        .map(|c| c.to_lowercase().replace(' ', "_"))
        .collect();
    header.extend(["mean_best_val_accuracy", "std", "max", "n"].map(String::from));
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let mut rec = r.key.clone();
        rec.extend([
            r.mean.to_string(),
            r.std.to_string(),
            r.max.to_string(),
            r.n.to_string(),
        ]);
        w.write_record(&rec).expect("in-memory write");
    }
    write_atomic(path, &w.into_inner().expect("in-memory write")).map_err(io_err(path))
}

/// Writes `accuracy_vs_epoch.svg` with one mean curve per group.
pub fn write_plots(dir: &Path, rows: &[ReportRow]) -> Result<PathBuf, ExperimentError> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 8] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let epochs = rows.iter().map(|r| r.curve.len()).max().unwrap_or(1).max(2);
    let x = |e: usize| PAD + (W - 2.0 * PAD) * e as f64 / (epochs - 1) as f64;
    let y = |a: f64| H - PAD - (H - 2.0 * PAD) * a;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        W, H + 16.0 * rows.len() as f64
    );
    let _ = writeln!(
        svg,
        "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    for t in 0..=4 {
        let a = t as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{a:.2}</text>",
            PAD - 4.0,
            y(a) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>",
        W / 2.0,
        H - PAD + 28.0
    );
    for (i, r) in rows.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = r
            .curve
            .iter()
            .enumerate()
            .map(|(e, a)| format!("{:.1},{:.1}", x(e), y(*a)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{PAD}\" y=\"{}\" fill=\"{color}\">{}</text>",
            H + 16.0 * i as f64,
            xml_escape(&r.key.join(" / "))
        );
    }
    svg.push_str("</svg>\n");
    let path = dir.join("accuracy_vs_epoch.svg");
    write_atomic(&path, svg.as_bytes()).map_err(io_err(&path))?;
    Ok(path)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(name: &str, styles: &str, acc: f64) -> ResultRecord {
        ResultRecord {
            name: name.into(),
            traditional: "None".into(),
            styles: styles.into(),
            backbone: "small_cnn".into(),
            seed: 0,
            best_val_accuracy: acc,
            best_epoch: 1,
            per_epoch_val_accuracy: format!("{acc}"),
            dataset_hash: "d".into(),
            config_hash: format!("h-{name}"),
            timestamp: timestamp(true),
            toolkit_version: TOOLKIT_VERSION.into(),
        }
    }

    #[test]
    fn ledger_round_trip_and_chain() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = dir.path().join("ledger.csv");
        assert!(read_ledger(&ledger).unwrap().is_empty());
        let recs = vec![
            record("a", "Snow", 0.5),
            record("b, \"quoted\"", "Wave", 1.0 / 3.0),
        ];
        for r in &recs {
            append_record(&ledger, r).unwrap();
        }
        assert_eq!(read_ledger(&ledger).unwrap(), recs);
        assert_eq!(verify_chain(&ledger).unwrap(), 2);
        let text = std::fs::read_to_string(&ledger)
            .unwrap()
            .replace("0.5", "0.9");
        std::fs::write(&ledger, text).unwrap();
        assert!(matches!(
            verify_chain(&ledger),
            Err(ExperimentError::Chain { row: 1, .. })
        ));
    }

    #[test]
    fn summary_sorts_descending_and_keeps_last_duplicate() {
        let mut rs = vec![
            record("a", "Snow", 0.5),
            record("b", "Wave", 0.8),
            record("c", "Scream", 0.6),
        ];
        rs.push(record("a", "Snow", 0.9));
        let rows = summarize(&rs, GroupBy::Style);
        let keys: Vec<&str> = rows.iter().map(|r| r.key[0].as_str()).collect();
        assert_eq!(keys, ["Snow", "Wave", "Scream"]);
        assert_eq!(rows[0].mean, 0.9);
        assert_eq!(render_table(&[], GroupBy::Cell), "no results\n");
        let text = render_table(&rows, GroupBy::Style);
        assert!(text.lines().nth(2).unwrap().starts_with("Snow"));
    }

    #[test]
    fn matrix_expansion_and_merge() {
        let text = r#"{
            "dataset": "toy:classes=3,per_class=4,size=16,seed=1",
            "seeds": [0, 1, 2],
            "classifier": {"epochs": 2},
            "experiments": [
                {"name": "none"},
                {"name": "flip-rot", "traditional": ["rotation", "flip_horizontal"], "classifier": {"epochs": 3}, "seeds": [5]}
            ]
        }"#;
        let m = Matrix::parse(Path::new("m.json"), text).unwrap();
        assert_eq!(m.configs.len(), 4);
        assert_eq!(m.configs[0].classifier.epochs, 2);
        assert_eq!(m.configs[3].classifier.epochs, 3);
        assert_eq!(m.configs[3].classifier.seed, 5);
        assert_eq!(m.configs[3].traditional_label(), "FlippingRotation");
        assert_eq!(m.configs[3].rotation_angles, DEFAULT_ROTATIONS.to_vec());
        assert_ne!(m.configs[0].config_hash(), m.configs[1].config_hash());
        let dup = text.replace("flip-rot", "none");
        assert!(Matrix::parse(Path::new("m.json"), &dup).is_err());
    }

    #[test]
    fn toy_refs() {
        let t = ToyRef::parse("toy:classes=2,per_class=5").unwrap().unwrap();
        assert_eq!((t.classes, t.per_class, t.size), (2, 5, 32));
        assert!(ToyRef::parse("data/x").unwrap().is_none());
        assert!(ToyRef::parse("toy:colour=3").is_err());
    }
}
