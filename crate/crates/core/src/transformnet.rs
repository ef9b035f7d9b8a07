//! Feed-forward transformation network: one trained instance per style.
//!
//! Layer recipe for `k = log2(downsample_factor)` and base width `C`:
//!
//! ```text
//! conv 9×9, C                      + IN + ReLU
//! k × conv 3×3 stride 2, doubling  + IN + ReLU
//! R × residual block (conv-IN-ReLU-conv-IN, identity skip)
//! k × (nearest ×2, conv 3×3 halving) + IN + ReLU
//! conv 9×9, 3 (with bias)          → 127.5·(tanh + 1)
//! ```
//!
//! All convolutions use reflection padding. Convolutions followed by
//! instance normalisation carry no bias (it would be cancelled).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerError};
use crate::image_tensor::{ColorSpace, ImageTensor, ValueRange};
use crate::losses::LossWeights;
use crate::lossnet::LossNetSettings;
use crate::nn::{he_normal, BlobError, Graph, PadMode, ParamSpec, ParamStore, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "style_model";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    ScaledTanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformNetConfig {
    pub num_residual_blocks: usize,
    pub base_channels: usize,
    pub downsample_factor: usize,
    pub norm: Norm,
    pub output_activation: OutputActivation,
}

impl Default for TransformNetConfig {
    fn default() -> Self {
        TransformNetConfig {
            num_residual_blocks: 5,
            base_channels: 32,
            downsample_factor: 4,
            norm: Norm::Instance,
            output_activation: OutputActivation::ScaledTanh,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransformNetError {
    #[error("invalid transform network config: `{field}` {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint {path} has an unreadable description: {message}")]
    Header { path: String, message: String },
    #[error("checkpoint weights do not match its network config: {0}")]
    Layout(#[from] BlobError),
}

impl TransformNetConfig {
    pub fn validate(&self) -> Result<(), TransformNetError> {
        if self.num_residual_blocks < 1 {
            return Err(TransformNetError::Config {
                field: "num_residual_blocks",
                reason: "must be at least 1".into(),
            });
        }
        if self.base_channels < 1 {
            return Err(TransformNetError::Config {
                field: "base_channels",
                reason: "must be at least 1".into(),
            });
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(TransformNetError::Config {
                field: "downsample_factor",
                reason: format!("must be a power of 2, got {}", self.downsample_factor),
            });
        }
        Ok(())
    }

    /// Number of stride-2 (and matching upsampling) stages.
    pub fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Total convolution count: input, downsampling, two per residual
    /// block, upsampling, output.
    pub fn conv_layer_count(&self) -> usize {
        1 + self.stages() + 2 * self.num_residual_blocks + self.stages() + 1
    }

    fn layer_plan(&self) -> Vec<ConvPlan> {
        let c = self.base_channels;
        let k = self.stages();
        let mut plan = vec![ConvPlan::new("in", 3, c, 9, 1, true)];
        let mut width = c;
        for i in 0..k {
            plan.push(ConvPlan::new(
                format!("down{}", i + 1),
                width,
                width * 2,
                3,
                2,
                true,
            ));
            width *= 2;
        }
        for r in 0..self.num_residual_blocks {
            plan.push(ConvPlan::new(
                format!("res{}a", r + 1),
                width,
                width,
                3,
                1,
                true,
            ));
            plan.push(ConvPlan::new(
                format!("res{}b", r + 1),
                width,
                width,
                3,
                1,
                true,
            ));
        }
        for i in 0..k {
            plan.push(ConvPlan::new(
                format!("up{}", i + 1),
                width,
                width / 2,
                3,
                1,
                true,
            ));
            width /= 2;
        }
        plan.push(ConvPlan::new("out", width, 3, 9, 1, false));
        plan
    }

    pub fn param_layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for p in self.layer_plan() {
            out.push(ParamSpec {
                name: format!("{}.weight", p.name),
                shape: [p.cout, p.cin, p.k, p.k],
            });
            let extra: &[&str] = if p.norm {
                &["gamma", "beta"]
            } else {
                &["bias"]
            };
            for e in extra {
                out.push(ParamSpec {
                    name: format!("{}.{e}", p.name),
                    shape: [p.cout, 1, 1, 1],
                });
            }
        }
        out
    }
}

struct ConvPlan {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    norm: bool,
}

impl ConvPlan {
    fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: bool,
    ) -> Self {
        ConvPlan {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            norm,
        }
    }
}

/// Everything needed to reproduce the training run that produced a
/// checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub weights: LossWeights,
    pub content_layers: Vec<String>,
    pub style_layers: Vec<String>,
    pub layer_weights: Vec<f64>,
    pub optimizer: String,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub corpus_id: String,
    pub style_image: String,
    pub style_image_sha256: String,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub loss_network: Option<LossNetSettings>,
    /// Steps actually completed when this checkpoint was written.
    pub completed_steps: usize,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        TrainingMeta {
            weights: LossWeights::default(),
            content_layers: Vec::new(),
            style_layers: Vec::new(),
            layer_weights: Vec::new(),
            optimizer: String::new(),
            learning_rate: 0.0,
            steps: 0,
            batch_size: 0,
            image_size: 0,
            seed: 0,
            corpus_id: String::new(),
            style_image: String::new(),
            style_image_sha256: String::new(),
            checkpoint_every: 0,
            log_every: 0,
            loss_network: None,
            completed_steps: 0,
        }
    }
}

/// Header payload of a style-model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleModelCheckpoint {
    pub config: TransformNetConfig,
    pub style_name: String,
    pub training_meta: TrainingMeta,
    pub layout: Vec<ParamSpec>,
}

#[derive(Clone, Debug)]
pub struct TransformNetwork {
    config: TransformNetConfig,
    params: ParamStore,
}

impl TransformNetwork {
    /// Fresh network: He-normal convolutions, unit gains, zero shifts.
    pub fn build(config: TransformNetConfig, seed: u64) -> Result<Self, TransformNetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for p in config.layer_plan() {
            params.push(
                format!("{}.weight", p.name),
                he_normal([p.cout, p.cin, p.k, p.k], &mut rng),
            );
            if p.norm {
                params.push(
                    format!("{}.gamma", p.name),
                    Tensor::full([p.cout, 1, 1, 1], 1.0),
                );
                params.push(format!("{}.beta", p.name), Tensor::zeros([p.cout, 1, 1, 1]));
            } else {
                params.push(format!("{}.bias", p.name), Tensor::zeros([p.cout, 1, 1, 1]));
            }
        }
        Ok(TransformNetwork { config, params })
    }

    pub fn from_params(
        config: TransformNetConfig,
        params: ParamStore,
    ) -> Result<Self, TransformNetError> {
        config.validate()?;
        params.check_layout(&config.param_layout())?;
        Ok(TransformNetwork { config, params })
    }

    pub fn config(&self) -> &TransformNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn weights_hash(&self) -> String {
        self.params.digest()
    }

    /// Number of parameter groups that are convolution kernels.
    pub fn conv_layer_count(&self) -> usize {
        self.params
            .names()
            .iter()
            .filter(|n| n.ends_with(".weight"))
            .count()
    }

    /// Adds the network to `g`. `params` are the bound parameters in
    /// storage order; `input` is a `[0, 255]` RGB batch whose sides are
    /// multiples of the downsample factor.
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Var {
        let plan = self.config.layer_plan();
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list matches layer plan");
        let x = g.channel_affine(input, &[0, 1, 2], &[127.5; 3], &[1.0 / 127.5; 3]);

        let mut conv = |g: &mut Graph, x: Var, p: &ConvPlan, relu: bool| -> Var {
            let w = next();
            let y = if p.norm {
                let c = g.conv2d(x, w, None, p.stride, p.k / 2, PadMode::Reflect);
                let (gamma, beta) = (next(), next());
                g.instance_norm(c, gamma, beta)
            } else {
                let b = next();
                g.conv2d(x, w, Some(b), p.stride, p.k / 2, PadMode::Reflect)
            };
            if relu {
                g.relu(y)
            } else {
                y
            }
        };

        let k = self.config.stages();
        let r = self.config.num_residual_blocks;
        let mut layers = plan.iter();
        let mut h = conv(g, x, layers.next().unwrap(), true);
        for _ in 0..k {
            h = conv(g, h, layers.next().unwrap(), true);
        }
        for _ in 0..r {
            let a = conv(g, h, layers.next().unwrap(), true);
            let b = conv(g, a, layers.next().unwrap(), false);
            h = g.add(h, b);
        }
        for _ in 0..k {
            let u = g.upsample2(h);
            h = conv(g, u, layers.next().unwrap(), true);
        }
        let z = conv(g, h, layers.next().unwrap(), false);
        g.scaled_tanh(z)
    }

    /// Runs a `[0, 255]` RGB tensor whose sides are multiples of the
    /// downsample factor.
    pub fn forward_tensor(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let input = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, input);
        g.value(out).clone()
    }

    /// Stylizes any image batch in one forward pass. Sides that are not
    /// multiples of the downsample factor are reflection-padded and the
    /// result is centre-cropped back; output is `[0, 255]` RGB of the
    /// input's size.
    pub fn stylize(&self, image: &ImageTensor) -> ImageTensor {
        let rgb = image.to_rgb_byte();
        let f = self.config.downsample_factor;
        let (h, w) = (rgb.height(), rgb.width());
        let (ph, pw) = (h.div_ceil(f) * f - h, w.div_ceil(f) * f - w);
        let padded = if ph + pw > 0 {
            rgb.pad_reflect(ph / 2, ph - ph / 2, pw / 2, pw - pw / 2)
        } else {
            rgb
        };
        let out = self.forward_tensor(&padded.to_tensor());
        let out = ImageTensor::from_tensor(&out, ValueRange::Byte, ColorSpace::Rgb)
            .map(|v| v.clamp(0.0, 255.0));
        if ph + pw > 0 {
            out.crop(ph / 2, pw / 2, h, w)
        } else {
            out
        }
    }

    pub fn save_checkpoint(
        &self,
        style_name: &str,
        meta: &TrainingMeta,
        path: &Path,
    ) -> Result<(), TransformNetError> {
        let header = StyleModelCheckpoint {
            config: self.config,
            style_name: style_name.to_string(),
            training_meta: meta.clone(),
            layout: self.params.layout(),
        };
        container::write(path, CHECKPOINT_KIND, &header, &self.params.to_blob())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, StyleModelCheckpoint), TransformNetError> {
        let c = container::read(path, CHECKPOINT_KIND)?;
        let header: StyleModelCheckpoint =
            serde_json::from_value(c.payload).map_err(|e| TransformNetError::Header {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let params = ParamStore::from_blob(&header.layout, &c.blob)?;
        let net = Self::from_params(header.config, params)?;
        Ok((net, header))
    }
}
