//! Trains one transformation network per style against the frozen loss
//! network over an unlabeled image corpus.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image_tensor::{self, ImageError, ImageTensor};
use crate::losses::{LossError, LossWeights};
use crate::lossnet::{FeatureMapSet, LossNetError, LossNetwork};
use crate::nn::{Graph, Optimizer, OptimizerKind};
use crate::objective::{evaluate, LossTrace, ObjectiveError};
use crate::transformnet::{
    StyleModelCheckpoint, TrainingMeta, TransformNetConfig, TransformNetError, TransformNetwork,
};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleTrainConfig {
    pub style_name: String,
    pub style_image_path: PathBuf,
    pub corpus_dir: PathBuf,
    pub weights: LossWeights,
    /// Style-layer weights `w_l`; empty means equal.
    #[serde(default)]
    pub layer_weights: Vec<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Corpus images and the style image are resized to this square size.
    pub image_size: usize,
    pub seed: u64,
    /// Intermediate checkpoint period in steps; 0 disables them.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl StyleTrainConfig {
    pub fn new(
        style_name: impl Into<String>,
        style_image_path: PathBuf,
        corpus_dir: PathBuf,
    ) -> Self {
        StyleTrainConfig {
            style_name: style_name.into(),
            style_image_path,
            corpus_dir,
            weights: LossWeights::default(),
            layer_weights: Vec::new(),
            batch_size: 4,
            steps: 2000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            image_size: 256,
            seed: 0,
            checkpoint_every: 0,
            log_every: 10,
        }
    }

    pub fn validate(&self, net_cfg: &TransformNetConfig) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if self.log_every < 1 {
            return bad("log_every must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(net_cfg.downsample_factor) {
            return bad(format!(
                "image_size {} is not a multiple of the downsample factor {}",
                self.image_size, net_cfg.downsample_factor
            ));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Copy of `base` with `λc` scaled by `content_scale` and the style name
/// suffixed by the scale (`Wave` → `Wave2`).
pub fn make_variant(
    base: &StyleTrainConfig,
    content_scale: f64,
) -> Result<StyleTrainConfig, TrainError> {
    if !(content_scale.is_finite() && content_scale > 0.0) {
        return Err(TrainError::Config(format!(
            "content scale must be positive, got {content_scale}"
        )));
    }
    let mut out = base.clone();
    out.weights.lambda_content *= content_scale;
    if content_scale != 1.0 {
        out.style_name = if content_scale.fract() == 0.0 {
            format!("{}{}", base.style_name, content_scale as u64)
        } else {
            format!("{}x{content_scale}", base.style_name)
        };
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus {0} holds no decodable images")]
    EmptyCorpus(PathBuf),
    #[error("cannot list corpus {path}: {source}")]
    Corpus {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("style image: {0}")]
    StyleImage(ImageError),
    #[error(transparent)]
    LossNet(#[from] LossNetError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Network(#[from] TransformNetError),
    #[error("checkpoint {path} failed validation: {message}")]
    Validation { path: PathBuf, message: String },
    #[error("loss became non-finite at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    NonFinite {
        step: usize,
        last_checkpoint: Option<PathBuf>,
        trace: LossTrace,
    },
}

/// Sorted image files directly inside `dir`.
pub fn list_images(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Decoded, resized corpus with an identifier over its file contents.
pub struct Corpus {
    pub images: Vec<ImageTensor>,
    pub id: String,
    pub skipped: Vec<(PathBuf, String)>,
}

pub fn load_corpus(dir: &Path, size: usize) -> Result<Corpus, TrainError> {
    let files = list_images(dir).map_err(|source| TrainError::Corpus {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut h = Sha256::new();
    h.update((size as u64).to_le_bytes());
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for f in files {
        match image_tensor::load_rgb_resized(&f, size, size) {
            Ok(img) => {
                let name = f
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                h.update(name.as_bytes());
                h.update([0]);
                h.update(std::fs::read(&f).unwrap_or_default());
                images.push(img);
            }
            Err(e) => {
                log::warn!("skipping corpus file: {e}");
                skipped.push((f, e.to_string()));
            }
        }
    }
    if images.is_empty() {
        return Err(TrainError::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(Corpus {
        images,
        id: hex::encode(h.finalize()),
        skipped,
    })
}

/// Outcome of [`train_style`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub network: TransformNetwork,
    pub checkpoint: StyleModelCheckpoint,
    pub trace: LossTrace,
    /// Objective of the first step.
    pub initial_total: f64,
    /// Mean objective over the last (up to) ten steps.
    pub final_running_total: f64,
    pub intermediate_checkpoints: Vec<PathBuf>,
}

/// `<stem>.step<k>.ckpt` next to `out`.
pub fn intermediate_path(out: &Path, step: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    out.with_file_name(format!("{stem}.step{step}.ckpt"))
}

fn validate_checkpoint(path: &Path, size: usize) -> Result<(), TrainError> {
    let fail = |message: String| TrainError::Validation {
        path: path.to_path_buf(),
        message,
    };
    let (net, _) = TransformNetwork::load_checkpoint(path).map_err(|e| fail(e.to_string()))?;
    let probe = ImageTensor::filled([1, 3, size, size], 127.0);
    let out = net.stylize(&probe);
    let (lo, hi) = out.min_max();
    if !out.all_finite() || lo < 0.0 || hi > 255.0 {
        return Err(fail(format!("probe output outside [0, 255]: [{lo}, {hi}]")));
    }
    Ok(())
}

const RUNNING_WINDOW: usize = 10;

/// Trains a fresh network and writes the final checkpoint to `out`, with
/// intermediate ones every `checkpoint_every` steps.
pub fn train_style(
    cfg: &StyleTrainConfig,
    net_cfg: &TransformNetConfig,
    loss_net: &LossNetwork,
    out: &Path,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(net_cfg)?;
    let style =
        image_tensor::load_rgb_resized(&cfg.style_image_path, cfg.image_size, cfg.image_size)
            .map_err(TrainError::StyleImage)?;
    let style_bytes = std::fs::read(&cfg.style_image_path).map_err(|source| {
        TrainError::StyleImage(ImageError::Io {
            path: cfg.style_image_path.clone(),
            source,
        })
    })?;
    let corpus = load_corpus(&cfg.corpus_dir, cfg.image_size)?;

    let target = loss_net.compute_style_target(&style, &cfg.layer_weights)?;
    let content_targets: Vec<FeatureMapSet> = corpus
        .images
        .iter()
        .map(|img| loss_net.extract_features(img, loss_net.content_layers()))
        .collect::<Result<_, _>>()?;

    let mut net = TransformNetwork::build(*net_cfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut meta = TrainingMeta {
        weights: cfg.weights,
        content_layers: loss_net.content_layers().to_vec(),
        style_layers: loss_net.style_layers().to_vec(),
        layer_weights: target.layer_weights().to_vec(),
        optimizer: cfg.optimizer.label(),
        learning_rate: cfg.learning_rate,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        image_size: cfg.image_size,
        seed: cfg.seed,
        corpus_id: corpus.id.clone(),
        style_image: cfg.style_image_path.display().to_string(),
        style_image_sha256: crate::container::sha256_hex(&style_bytes),
        checkpoint_every: cfg.checkpoint_every,
        log_every: cfg.log_every,
        loss_network: Some(loss_net.settings()),
        completed_steps: 0,
    };

    let mut trace = LossTrace::default();
    let mut recent: Vec<f64> = Vec::new();
    let mut initial_total = f64::NAN;
    let mut intermediate = Vec::new();
    let mut last_good: Option<PathBuf> = None;

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..corpus.images.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus.images[order[cursor]].clone());
            targets.push(content_targets[order[cursor]].clone());
            cursor += 1;
        }
        let x = ImageTensor::stack(&batch).to_tensor();

        let mut g = Graph::new();
        let vars = net.params().bind(&mut g, true);
        let input = g.constant(x);
        let y = net.forward(&mut g, &vars, input);
        let eval = match evaluate(&mut g, loss_net, y, &targets, &target, &cfg.weights) {
            Ok(e) if e.total.is_finite() => e,
            Ok(_) | Err(ObjectiveError::Loss(LossError::NonFinite { .. })) => {
                return Err(TrainError::NonFinite {
                    step,
                    last_checkpoint: last_good,
                    trace,
                });
            }
            Err(e) => return Err(e.into()),
        };
        if step == 1 {
            initial_total = eval.total;
        }
        if (step - 1) % cfg.log_every == 0 {
            trace.push(eval.row(step));
        }
        recent.push(eval.total);
        if recent.len() > RUNNING_WINDOW {
            recent.remove(0);
        }
        let mut grads = g.backward(eval.seeds);
        let grads = net.params().collect_grads(&vars, &mut grads);
        opt.step(net.params_mut(), &grads);

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            meta.completed_steps = step;
            let p = intermediate_path(out, step);
            net.save_checkpoint(&cfg.style_name, &meta, &p)?;
            validate_checkpoint(&p, net_cfg.downsample_factor * 8)?;
            log::info!("step {step}: checkpoint {}", p.display());
            intermediate.push(p.clone());
            last_good = Some(p);
        }
    }

    meta.completed_steps = cfg.steps;
    net.save_checkpoint(&cfg.style_name, &meta, out)?;
    validate_checkpoint(out, net_cfg.downsample_factor * 8)?;
    let (_, checkpoint) = TransformNetwork::load_checkpoint(out)?;
    Ok(TrainOutcome {
        network: net,
        checkpoint,
        trace,
        initial_total,
        final_running_total: recent.iter().sum::<f64>() / recent.len() as f64,
        intermediate_checkpoints: intermediate,
    })
}
