//! Classification harness: stratified split, training with per-epoch
//! validation accuracy, best-epoch selection.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentor::LabeledDataset;
use crate::container::{self, ContainerError};
use crate::image_tensor::{ImageError, ImageTensor};
use crate::nn::{
    he_normal, BlobError, Graph, Optimizer, OptimizerKind, PadMode, ParamStore, Tensor, Var,
};
use crate::vgg::{Backbone, BackboneError, VggDepth, VggSpec};

pub const CLASSIFIER_KIND: &str = "classifier";

/// Per-channel mean and standard deviation of ImageNet at the `[0, 255]` scale.
const NORM_MEAN: [f32; 3] = [123.675, 116.28, 103.53];
const NORM_STD: [f32; 3] = [58.395, 57.12, 57.375];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SmallCnn,
    Vgg16Like,
    Vgg19Like,
}

impl BackboneKind {
    pub fn label(&self) -> &'static str {
        match self {
            BackboneKind::SmallCnn => "small_cnn",
            BackboneKind::Vgg16Like => "vgg16_like",
            BackboneKind::Vgg19Like => "vgg19_like",
        }
    }

    fn vgg(&self, width_divisor: usize) -> Option<VggSpec> {
        let depth = match self {
            BackboneKind::SmallCnn => return None,
            BackboneKind::Vgg16Like => VggDepth::Vgg16,
            BackboneKind::Vgg19Like => VggDepth::Vgg19,
        };
        Some(VggSpec {
            depth,
            width_divisor: width_divisor.max(1),
        })
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small_cnn" => Ok(BackboneKind::SmallCnn),
            "vgg16_like" => Ok(BackboneKind::Vgg16Like),
            "vgg19_like" => Ok(BackboneKind::Vgg19Like),
            _ => Err(format!(
                "unknown backbone `{s}` (expected small_cnn, vgg16_like or vgg19_like)"
            )),
        }
    }
}

fn default_width_divisor() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub backbone: BackboneKind,
    /// Freeze backbone features and train only the head.
    pub pretrained: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub input_size: usize,
    /// Channel divisor for the VGG-like backbones.
    #[serde(default = "default_width_divisor")]
    pub width_divisor: usize,
    /// Feature weights for `pretrained`; a seeded stand-in when unset.
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            backbone: BackboneKind::SmallCnn,
            pretrained: false,
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            input_size: 32,
            width_divisor: default_width_divisor(),
            pretrained_weights: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("invalid classifier config: {0}")]
    Config(String),
    #[error("class `{class}` has {count} item(s); splitting needs at least 2")]
    TooFewItems { class: String, count: usize },
    #[error("train fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("accuracy of an empty prediction set is undefined")]
    Empty,
    #[error("train classes {train:?} differ from validation classes {val:?}")]
    ClassMismatch {
        train: Vec<String>,
        val: Vec<String>,
    },
    #[error("validation item {0} is not an original image")]
    ImpureValidation(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Layout(#[from] BlobError),
    #[error("cannot write run artifact {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged {
        epoch: usize,
        partial: Box<ClassifierRun>,
    },
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        let bad = |m: &str| Err(ClassifyError::Config(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.input_size < 32 {
            return bad("input_size must be at least 32");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.pretrained && self.backbone == BackboneKind::SmallCnn {
            return bad("pretrained features are only available for the VGG-like backbones");
        }
        Ok(())
    }
}

/// Stratified split: per class, `round(train_fraction · n_c)` items go to
/// train (halves round up) and the rest to validation.
pub fn split_dataset(
    dataset: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), ClassifyError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ClassifyError::Fraction(train_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (ci, class) in dataset.classes.iter().enumerate() {
        let mut members: Vec<usize> = (0..dataset.items.len())
            .filter(|&i| dataset.items[i].class_index == ci)
            .collect();
        if members.len() < 2 {
            return Err(ClassifyError::TooFewItems {
                class: class.clone(),
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_train = train_count(members.len(), train_fraction);
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    let subset = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        LabeledDataset {
            root_dir: dataset.root_dir.clone(),
            classes: dataset.classes.clone(),
            items: idx.into_iter().map(|i| dataset.items[i].clone()).collect(),
        }
    };
    Ok((subset(train), subset(val)))
}

/// `round(fraction · n)`, halves up.
pub fn train_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + 1e-9).round() as usize
}

/// Copies `dataset` files into `out/<class>/...`, keeping relative paths.
pub fn materialize(dataset: &LabeledDataset, out: &Path) -> Result<(), ClassifyError> {
    for it in &dataset.items {
        let src = dataset.path_of(it);
        let dst = out.join(&it.path);
        let bytes = std::fs::read(&src).map_err(|source| ClassifyError::Io {
            path: src.clone(),
            source,
        })?;
        container::write_atomic(&dst, &bytes).map_err(|source| ClassifyError::Io {
            path: dst.clone(),
            source,
        })?;
    }
    Ok(())
}

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, ClassifyError> {
    if predictions.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(ClassifyError::Empty);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
///
/// The partition sum adds terms in sorted order so the result does not
/// depend on class order.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.batch();
    let k = logits.item_len();
    assert_eq!(labels.len(), n);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for b in 0..n {
        let row: Vec<f64> = logits.item(b).iter().map(|v| *v as f64).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let mut sorted = exps.clone();
        sorted.sort_by(f64::total_cmp);
        let z: f64 = sorted.iter().sum();
        loss += z.ln() - (row[labels[b]] - max);
        let g = grad.item_mut(b);
        for j in 0..k {
            let p = exps[j] / z;
            let t = if j == labels[b] { 1.0 } else { 0.0 };
            g[j] = ((p - t) / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierHeader {
    config: ClassifierConfig,
    classes: Vec<String>,
    layout: Vec<crate::nn::ParamSpec>,
    frozen: usize,
    epoch: usize,
    val_accuracy: f64,
}

/// A backbone plus linear head. The first `frozen` parameters are not
/// trained.
#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    classes: Vec<String>,
    params: ParamStore,
    frozen: usize,
}

const SMALL_WIDTHS: [usize; 3] = [16, 32, 64];

impl Classifier {
    pub fn build(config: &ClassifierConfig, classes: &[String]) -> Result<Self, ClassifyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.input_size;
        let (mut params, frozen, feat) = match config.backbone.vgg(config.width_divisor) {
            None => {
                let mut p = ParamStore::new();
                let mut cin = 3;
                for (i, &c) in SMALL_WIDTHS.iter().enumerate() {
                    p.push(
                        format!("conv{}.weight", i + 1),
                        he_normal([c, cin, 3, 3], &mut rng),
                    );
                    p.push(format!("conv{}.bias", i + 1), Tensor::zeros([c, 1, 1, 1]));
                    cin = c;
                }
                let side = s.div_ceil(8);
                (p, 0, cin * side * side)
            }
            Some(spec) => {
                let p = if config.pretrained {
                    match &config.pretrained_weights {
                        Some(w) => {
                            let b = Backbone::load(w)?;
                            if b.spec() != &spec {
                                return Err(ClassifyError::Config(format!(
                                    "pretrained weights are {}, config asks for {}",
                                    b.spec().name(),
                                    spec.name()
                                )));
                            }
                            b.params().clone()
                        }
                        None => Backbone::seeded(spec, 0).params().clone(),
                    }
                } else {
                    spec.init_params(config.seed)
                };
                let frozen = if config.pretrained { p.len() } else { 0 };
                let side = s.div_ceil(32);
                (p, frozen, spec.feature_channels() * side * side)
            }
        };
        params.push("head.weight", Tensor::zeros([classes.len(), feat, 1, 1]));
        params.push("head.bias", Tensor::zeros([classes.len(), 1, 1, 1]));
        Ok(Classifier {
            config: config.clone(),
            classes: classes.to_vec(),
            params,
            frozen,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.bind_with(g, |i| i >= self.frozen)
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let src = [0, 1, 2];
        let scale = NORM_STD.map(|s| 1.0 / s);
        let mut h = g.channel_affine(x, &src, &NORM_MEAN, &scale);
        let n_body = vars.len() - 2;
        match self.config.backbone.vgg(self.config.width_divisor) {
            None => {
                for i in 0..SMALL_WIDTHS.len() {
                    h = g.conv2d(h, vars[2 * i], Some(vars[2 * i + 1]), 1, 1, PadMode::Zero);
                    h = g.relu(h);
                    h = g.max_pool2(h);
                }
            }
            Some(spec) => {
                let last = spec.layers().len() - 1;
                h = *spec.forward(g, &vars[..n_body], h, last).last().unwrap();
            }
        }
        g.linear(h, vars[n_body], vars[n_body + 1])
    }

    /// Class scores for a `[0, 255]` RGB batch.
    pub fn logits(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let input = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, input);
        g.value(out).clone()
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let l = self.logits(x);
        (0..l.batch()).map(|b| argmax(l.item(b))).collect()
    }

    fn train_step(&mut self, opt: &mut Optimizer, x: Tensor, labels: &[usize]) -> f64 {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let input = g.constant(x);
        let logits = self.forward(&mut g, &vars, input);
        let (loss, dlogits) = softmax_cross_entropy(g.value(logits), labels);
        if !loss.is_finite() {
            return loss;
        }
        let mut grads = g.backward(vec![(logits, dlogits)]);
        let grads = self.params.collect_grads(&vars, &mut grads);
        opt.step(&mut self.params, &grads);
        loss
    }

    pub fn save(&self, path: &Path, epoch: usize, val_accuracy: f64) -> Result<(), ClassifyError> {
        let header = ClassifierHeader {
            config: self.config.clone(),
            classes: self.classes.clone(),
            layout: self.params.layout(),
            frozen: self.frozen,
            epoch,
            val_accuracy,
        };
        container::write(path, CLASSIFIER_KIND, &header, &self.params.to_blob())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifyError> {
        let c = container::read(path, CLASSIFIER_KIND)?;
        let header: ClassifierHeader = serde_json::from_value(c.payload)
            .map_err(|e| ClassifyError::Config(format!("{}: {e}", path.display())))?;
        let params = ParamStore::from_blob(&header.layout, &c.blob)?;
        Ok(Classifier {
            config: header.config,
            classes: header.classes,
            params,
            frozen: header.frozen,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRun {
    pub config: ClassifierConfig,
    pub classes: Vec<String>,
    pub per_epoch_val_accuracy: Vec<f64>,
    pub per_epoch_train_loss: Vec<f64>,
    pub best_val_accuracy: f64,
    /// 1-based; earliest epoch reaching the best accuracy.
    pub best_epoch: usize,
    /// Validation predictions of the best epoch, in validation item order.
    pub best_val_predictions: Vec<usize>,
    pub wall_time_s: f64,
}

fn load_all(ds: &LabeledDataset, size: usize) -> Result<Vec<Tensor>, ClassifyError> {
    (0..ds.len())
        .map(|i| Ok(ds.load(i, size)?.to_tensor()))
        .collect()
}

fn batch_of(images: &[Tensor], idx: &[usize]) -> Tensor {
    let items: Vec<Tensor> = idx.iter().map(|&i| images[i].clone()).collect();
    Tensor::stack(&items)
}

const EVAL_BATCH: usize = 64;

/// Trains on `train`, evaluating top-1 accuracy on `val` after every epoch.
/// With `run_dir`, writes `config.json`, `trace.csv` and the best epoch's
/// weights as `best.ckpt`.
pub fn train_classifier(
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &ClassifierConfig,
    run_dir: Option<&Path>,
) -> Result<ClassifierRun, ClassifyError> {
    cfg.validate()?;
    if train.classes != val.classes {
        return Err(ClassifyError::ClassMismatch {
            train: train.classes.clone(),
            val: val.classes.clone(),
        });
    }
    if let Some(it) = val.items.iter().find(|it| !it.provenance.is_original()) {
        return Err(ClassifyError::ImpureValidation(it.path.clone()));
    }
    let start = Instant::now();
    let train_x = load_all(train, cfg.input_size)?;
    let val_x = load_all(val, cfg.input_size)?;
    let train_y: Vec<usize> = train.items.iter().map(|i| i.class_index).collect();
    let val_y: Vec<usize> = val.items.iter().map(|i| i.class_index).collect();

    let mut model = Classifier::build(cfg, &train.classes)?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut run = ClassifierRun {
        config: cfg.clone(),
        classes: train.classes.clone(),
        per_epoch_val_accuracy: Vec::new(),
        per_epoch_train_loss: Vec::new(),
        best_val_accuracy: 0.0,
        best_epoch: 0,
        best_val_predictions: Vec::new(),
        wall_time_s: 0.0,
    };
    if let Some(dir) = run_dir {
        let text = serde_json::to_string_pretty(cfg).expect("config serializes");
        write_file(&dir.join("config.json"), format!("{text}\n").as_bytes())?;
    }

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_x.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let loss = model.train_step(&mut opt, batch_of(&train_x, chunk), &labels);
            if !loss.is_finite() {
                run.wall_time_s = start.elapsed().as_secs_f64();
                return Err(ClassifyError::Diverged {
                    epoch,
                    partial: Box::new(run),
                });
            }
            loss_sum += loss * chunk.len() as f64;
        }
        let idx: Vec<usize> = (0..val_x.len()).collect();
        let preds: Vec<usize> = idx
            .chunks(EVAL_BATCH)
            .flat_map(|c| model.predict(&batch_of(&val_x, c)))
            .collect();
        let acc = top1_accuracy(&preds, &val_y)?;
        run.per_epoch_val_accuracy.push(acc);
        run.per_epoch_train_loss
            .push(loss_sum / train_x.len() as f64);
        if run.best_epoch == 0 || acc > run.best_val_accuracy {
            run.best_val_accuracy = acc;
            run.best_epoch = epoch;
            run.best_val_predictions = preds;
            if let Some(dir) = run_dir {
                model.save(&dir.join("best.ckpt"), epoch, acc)?;
            }
        }
        log::info!(
            "epoch {epoch}: train loss {:.4}, val acc {acc:.4}",
            loss_sum / train_x.len() as f64
        );
    }
    run.wall_time_s = start.elapsed().as_secs_f64();
    if let Some(dir) = run_dir {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "val_accuracy"])
            .expect("in-memory write");
        for (e, (l, a)) in run
            .per_epoch_train_loss
            .iter()
            .zip(&run.per_epoch_val_accuracy)
            .enumerate()
        {
            w.write_record([(e + 1).to_string(), l.to_string(), a.to_string()])
                .expect("in-memory write");
        }
        write_file(
            &dir.join("trace.csv"),
            &w.into_inner().expect("in-memory write"),
        )?;
    }
    Ok(run)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ClassifyError> {
    container::write_atomic(path, bytes).map_err(|source| ClassifyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a single image prepared for a classifier.
pub fn prepare(image: &ImageTensor, size: usize) -> Result<Tensor, ImageError> {
    Ok(image.to_rgb_byte().resized(size, size)?.to_tensor())
}
