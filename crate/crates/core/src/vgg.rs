//! VGG-style convolutional backbones: 3×3 zero-padded convolutions with
//! ReLU, five blocks separated by 2×2 max pooling.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerError};
use crate::nn::{he_normal, BlobError, Graph, PadMode, ParamSpec, ParamStore, Tensor, Var};

pub const BACKBONE_KIND: &str = "vgg_backbone";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VggDepth {
    Vgg16,
    Vgg19,
}

/// Topology of a VGG backbone. `width_divisor` shrinks every block's
/// channel count (1 is the published width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VggSpec {
    pub depth: VggDepth,
    pub width_divisor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Relu,
    Pool,
}

/// One tappable layer of the backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub id: String,
    pub kind: LayerKind,
    pub channels: usize,
    /// Cumulative downsampling factor at this layer's output.
    pub stride: usize,
}

const FULL_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

impl VggSpec {
    pub fn vgg16() -> Self {
        VggSpec {
            depth: VggDepth::Vgg16,
            width_divisor: 1,
        }
    }

    pub fn vgg19() -> Self {
        VggSpec {
            depth: VggDepth::Vgg19,
            width_divisor: 1,
        }
    }

    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        self.width_divisor = divisor.max(1);
        self
    }

    pub fn name(&self) -> String {
        let base = match self.depth {
            VggDepth::Vgg16 => "vgg16",
            VggDepth::Vgg19 => "vgg19",
        };
        if self.width_divisor == 1 {
            base.to_string()
        } else {
            format!("{base}/w{}", self.width_divisor)
        }
    }

    fn convs_per_block(&self) -> [usize; 5] {
        match self.depth {
            VggDepth::Vgg16 => [2, 2, 3, 3, 3],
            VggDepth::Vgg19 => [2, 2, 4, 4, 4],
        }
    }

    pub fn block_widths(&self) -> [usize; 5] {
        FULL_WIDTHS.map(|w| (w / self.width_divisor).max(1))
    }

    /// Every tappable layer in forward order.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut stride = 1;
        for (b, (&n, &c)) in self
            .convs_per_block()
            .iter()
            .zip(&self.block_widths())
            .enumerate()
        {
            for i in 1..=n {
                for (kind, prefix) in [(LayerKind::Conv, "conv"), (LayerKind::Relu, "relu")] {
                    out.push(LayerInfo {
                        id: format!("{prefix}{}_{i}", b + 1),
                        kind,
                        channels: c,
                        stride,
                    });
                }
            }
            stride *= 2;
            out.push(LayerInfo {
                id: format!("pool{}", b + 1),
                kind: LayerKind::Pool,
                channels: c,
                stride,
            });
        }
        out
    }

    pub fn layer(&self, id: &str) -> Option<(usize, LayerInfo)> {
        self.layers()
            .into_iter()
            .enumerate()
            .find(|(_, l)| l.id == id)
    }

    /// Channel count of the final pooled feature map.
    pub fn feature_channels(&self) -> usize {
        self.block_widths()[4]
    }

    /// He-initialised weights, zero biases. Deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (b, (&n, &c)) in self
            .convs_per_block()
            .iter()
            .zip(&self.block_widths())
            .enumerate()
        {
            for i in 1..=n {
                let id = format!("conv{}_{i}", b + 1);
                store.push(format!("{id}.weight"), he_normal([c, cin, 3, 3], &mut rng));
                store.push(format!("{id}.bias"), Tensor::zeros([c, 1, 1, 1]));
                cin = c;
            }
        }
        store
    }

    pub fn param_layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (b, (&n, &c)) in self
            .convs_per_block()
            .iter()
            .zip(&self.block_widths())
            .enumerate()
        {
            for i in 1..=n {
                let id = format!("conv{}_{i}", b + 1);
                out.push(ParamSpec {
                    name: format!("{id}.weight"),
                    shape: [c, cin, 3, 3],
                });
                out.push(ParamSpec {
                    name: format!("{id}.bias"),
                    shape: [c, 1, 1, 1],
                });
                cin = c;
            }
        }
        out
    }

    /// Runs layers `0..=last` (indices into [`VggSpec::layers`]) and returns
    /// every layer's output. `params` are the bound weights in storage order.
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var, last: usize) -> Vec<Var> {
        let layers = self.layers();
        let mut outs = Vec::with_capacity(last + 1);
        let mut x = input;
        let mut conv_idx = 0;
        for info in layers.iter().take(last + 1) {
            x = match info.kind {
                LayerKind::Conv => {
                    let (w, b) = (params[2 * conv_idx], params[2 * conv_idx + 1]);
                    conv_idx += 1;
                    g.conv2d(x, w, Some(b), 1, 1, PadMode::Zero)
                }
                LayerKind::Relu => g.relu(x),
                LayerKind::Pool => g.max_pool2(x),
            };
            outs.push(x);
        }
        outs
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("backbone file {path} has an unreadable description: {message}")]
    Payload { path: String, message: String },
    #[error("backbone weights do not match the declared topology: {0}")]
    Layout(#[from] BlobError),
}

#[derive(Serialize, Deserialize)]
struct BackbonePayload {
    id: String,
    spec: VggSpec,
    layout: Vec<ParamSpec>,
}

/// A VGG backbone with frozen weights.
///
/// There is deliberately no way to obtain mutable access to the weights.
#[derive(Clone, Debug)]
pub struct Backbone {
    id: String,
    spec: VggSpec,
    params: ParamStore,
}

impl Backbone {
    /// Seeded He-initialised stand-in used when no pretrained file is
    /// configured.
    pub fn seeded(spec: VggSpec, seed: u64) -> Self {
        Backbone {
            id: format!("{}/seeded-{seed}", spec.name()),
            spec,
            params: spec.init_params(seed),
        }
    }

    pub fn from_params(
        id: impl Into<String>,
        spec: VggSpec,
        params: ParamStore,
    ) -> Result<Self, BlobError> {
        params.check_layout(&spec.param_layout())?;
        Ok(Backbone {
            id: id.into(),
            spec,
            params,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn spec(&self) -> &VggSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// SHA-256 of the weight blob.
    pub fn weights_hash(&self) -> String {
        self.params.digest()
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let payload = BackbonePayload {
            id: self.id.clone(),
            spec: self.spec,
            layout: self.params.layout(),
        };
        container::write(path, BACKBONE_KIND, &payload, &self.params.to_blob())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let c = container::read(path, BACKBONE_KIND)?;
        let payload: BackbonePayload =
            serde_json::from_value(c.payload).map_err(|e| BackboneError::Payload {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let params = ParamStore::from_blob(&payload.layout, &c.blob)?;
        Ok(Backbone::from_params(payload.id, payload.spec, params)?)
    }

    /// Binds the frozen weights and runs layers `0..=last`.
    pub fn forward(&self, g: &mut Graph, input: Var, last: usize) -> Vec<Var> {
        let vars = self.params.bind(g, false);
        self.spec.forward(g, &vars, input, last)
    }
}
