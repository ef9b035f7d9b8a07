//! Iterative style transfer: optimise the pixels of one image directly
//! against the combined objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image_tensor::ImageTensor;
use crate::losses::{LossWeights, StyleTarget};
use crate::lossnet::{FeatureMapSet, LossNetwork};
use crate::nn::{AdamState, Graph};
use crate::objective::{evaluate, LossTrace, ObjectiveError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform on `[0, 255]` per pixel.
    WhiteNoise,
    ContentCopy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRunConfig {
    pub weights: LossWeights,
    pub iterations: usize,
    /// Adam step size at the `[0, 255]` scale.
    pub step_size: f64,
    pub init: Init,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DescriptiveRunConfig {
    fn default() -> Self {
        DescriptiveRunConfig {
            weights: LossWeights::default(),
            iterations: 500,
            step_size: 1.0,
            init: Init::WhiteNoise,
            seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DescriptiveError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("objective became non-finite at step {step} (trace holds {} logged rows)", trace.len())]
    NonFinite { step: usize, trace: LossTrace },
}

impl DescriptiveRunConfig {
    pub fn validate(&self) -> Result<(), DescriptiveError> {
        if self.iterations < 1 {
            return Err(DescriptiveError::Config(
                "iterations must be at least 1".into(),
            ));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(DescriptiveError::Config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.log_every < 1 {
            return Err(DescriptiveError::Config(
                "log_every must be at least 1".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(|e| DescriptiveError::Config(e.to_string()))
    }
}

/// Result of [`optimize`].
#[derive(Clone, Debug)]
pub struct DescriptiveOutcome {
    /// Lowest-objective iterate seen.
    pub image: ImageTensor,
    pub best_total: f64,
    /// Rows at every step that is a multiple of `log_every`.
    pub trace: LossTrace,
}

/// Minimises the objective over the pixels of a single image, clamping to
/// `[0, 255]` after every Adam step.
pub fn optimize(
    content: &ImageTensor,
    style_target: &StyleTarget,
    content_feats: &FeatureMapSet,
    net: &LossNetwork,
    cfg: &DescriptiveRunConfig,
) -> Result<DescriptiveOutcome, DescriptiveError> {
    cfg.validate()?;
    let content = content.to_rgb_byte();
    if content.batch() != 1 {
        return Err(DescriptiveError::Config(format!(
            "expected one content image, got {}",
            content.batch()
        )));
    }
    let mut x = match cfg.init {
        Init::ContentCopy => content.clone(),
        Init::WhiteNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            content.map(|_| rng.random_range(0.0..=255.0))
        }
    };
    let targets = [content_feats.clone()];
    let mut adam = AdamState::<f64>::new(x.len());
    let mut trace = LossTrace::default();
    let mut best = (f64::INFINITY, x.clone());

    // `iterations` updates, then one last evaluation of the final iterate.
    for step in 0..=cfg.iterations {
        let mut g = Graph::new();
        let y = g.variable(x.to_tensor());
        let eval =
            evaluate(&mut g, net, y, &targets, style_target, &cfg.weights).map_err(
                |e| match e {
                    ObjectiveError::Loss(crate::losses::LossError::NonFinite { .. }) => {
                        DescriptiveError::NonFinite {
                            step,
                            trace: trace.clone(),
                        }
                    }
                    other => other.into(),
                },
            )?;
        if !eval.total.is_finite() {
            return Err(DescriptiveError::NonFinite { step, trace });
        }
        if step < cfg.iterations && step % cfg.log_every == 0 {
            trace.push(eval.row(step));
        }
        if eval.total < best.0 {
            best = (eval.total, x.clone());
        }
        if step == cfg.iterations {
            break;
        }
        let grads = g.backward(eval.seeds);
        let grad: Vec<f64> = grads
            .get(y)
            .map(|t| t.data().iter().map(|v| *v as f64).collect())
            .unwrap_or_else(|| vec![0.0; x.len()]);
        adam.step(x.data_mut(), &grad, cfg.step_size);
        x.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 255.0));
    }
    Ok(DescriptiveOutcome {
        image: best.1,
        best_total: best.0,
        trace,
    })
}
