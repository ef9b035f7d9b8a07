//! The frozen loss network: preprocessing, tapped feature extraction and
//! cached style targets.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::container::{canonical_json, sha256_hex};
use crate::image_tensor::{ColorSpace, ImageTensor, ValueRange};
use crate::losses::{gram_matrix, FeatureMap, LossError, StyleTarget};
use crate::nn::{Graph, Tensor, Var};
use crate::vgg::{Backbone, BackboneError, VggSpec};

/// Smallest height and width the loss network accepts.
pub const MIN_IMAGE_SIZE: usize = 32;

pub const IMAGENET_MEANS: [f64; 3] = [123.68, 116.779, 103.939];

#[derive(Debug, thiserror::Error)]
pub enum LossNetError {
    #[error("unknown layer id `{id}` (available: {available})")]
    UnknownLayer { id: String, available: String },
    #[error("image is {height}×{width}, the loss network needs at least {min}×{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("the loss network takes 3-channel images, got {0} channels")]
    Channels(usize),
    #[error("expected a single image, got a batch of {0}")]
    NotSingle(usize),
    #[error("invalid preprocessing: {0}")]
    Preprocess(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

/// Mapping from `[0, 255]` images to backbone input:
/// `(x[order] − mean) · scale`, means listed in the backbone's channel order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub channel_means: [f64; 3],
    pub channel_order: ChannelOrder,
    pub scale: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            channel_means: IMAGENET_MEANS,
            channel_order: ChannelOrder::Rgb,
            scale: 1.0,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<(), LossNetError> {
        if !self.channel_means.iter().all(|m| m.is_finite()) {
            return Err(LossNetError::Preprocess(
                "channel means must be finite".into(),
            ));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(LossNetError::Preprocess(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Adds the preprocessing step for an image with the given metadata.
    pub fn apply(&self, g: &mut Graph, x: Var, range: ValueRange, color: ColorSpace) -> Var {
        let in_bgr = color == ColorSpace::Bgr;
        let want_bgr = self.channel_order == ChannelOrder::Bgr;
        let source: Vec<usize> = if in_bgr == want_bgr {
            vec![0, 1, 2]
        } else {
            vec![2, 1, 0]
        };
        let unit = match range {
            ValueRange::Byte => 1.0,
            ValueRange::Unit => 255.0,
        };
        let shift: Vec<f32> = self
            .channel_means
            .iter()
            .map(|m| (m / unit) as f32)
            .collect();
        let scale = vec![(self.scale * unit) as f32; 3];
        g.channel_affine(x, &source, &shift, &scale)
    }
}

/// Per-layer activations of one image, in request order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet {
    maps: Vec<FeatureMap>,
    source_shape: (usize, usize),
}

impl FeatureMapSet {
    pub fn new(maps: Vec<FeatureMap>, source_shape: (usize, usize)) -> Self {
        FeatureMapSet { maps, source_shape }
    }

    pub fn get(&self, layer_id: &str) -> Option<&FeatureMap> {
        self.maps.iter().find(|m| m.layer_id() == layer_id)
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn layer_ids(&self) -> Vec<&str> {
        self.maps.iter().map(|m| m.layer_id()).collect()
    }

    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Converts item `b` of an NCHW activation into a feature map.
pub fn feature_map(layer_id: &str, t: &Tensor, b: usize) -> Result<FeatureMap, LossError> {
    let [_, c, h, w] = t.shape();
    FeatureMap::new(
        layer_id,
        c,
        h * w,
        t.item(b).iter().map(|v| *v as f64).collect(),
    )
}

/// Stacks per-item feature-map gradients back into an NCHW tensor.
pub fn feature_grad_tensor(shape: [usize; 4], items: &[Vec<f64>]) -> Tensor {
    assert_eq!(items.len(), shape[0]);
    let mut data = Vec::with_capacity(shape.iter().product());
    for it in items {
        data.extend(it.iter().map(|v| *v as f32));
    }
    Tensor::from_vec(shape, data)
}

/// The configured layer sets and preprocessing of a loss network, without
/// the weights. Stored with checkpoints so runs are self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossNetSettings {
    pub backbone_id: String,
    pub weights_sha256: String,
    pub content_layers: Vec<String>,
    pub style_layers: Vec<String>,
    pub preprocessing: PreprocessSpec,
}

/// How to obtain a loss network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossNetConfig {
    pub spec: VggSpec,
    /// Seed of the He-initialised stand-in used when `weights` is unset.
    pub seed: u64,
    pub weights: Option<PathBuf>,
    /// Manifest the weight file must match.
    pub manifest: Option<PathBuf>,
    pub content_layers: Vec<String>,
    pub style_layers: Vec<String>,
    pub preprocessing: PreprocessSpec,
}

impl Default for LossNetConfig {
    fn default() -> Self {
        LossNetConfig {
            spec: VggSpec::vgg16().with_width_divisor(4),
            seed: 0,
            weights: None,
            manifest: None,
            content_layers: default_content_layers(),
            style_layers: default_style_layers(),
            preprocessing: PreprocessSpec::default(),
        }
    }
}

pub fn default_content_layers() -> Vec<String> {
    vec!["relu2_2".into()]
}

pub fn default_style_layers() -> Vec<String> {
    ["relu1_2", "relu2_2", "relu3_3", "relu4_3"]
        .map(String::from)
        .to_vec()
}

impl LossNetConfig {
    pub fn build(&self) -> Result<LossNetwork, LossNetError> {
        let backbone = match &self.weights {
            Some(path) => {
                if let Some(m) = &self.manifest {
                    WeightManifest::load(m)?.verify(path)?;
                }
                Backbone::load(path)?
            }
            None => Backbone::seeded(self.spec, self.seed),
        };
        LossNetwork::new(
            Arc::new(backbone),
            self.content_layers.clone(),
            self.style_layers.clone(),
            self.preprocessing,
        )
    }
}

type CacheKey = String;

/// A frozen backbone plus the layers it is tapped at.
///
/// Safe to share between threads; the only interior mutability is the
/// style-target cache.
#[derive(Debug)]
pub struct LossNetwork {
    backbone: Arc<Backbone>,
    content_layers: Vec<String>,
    style_layers: Vec<String>,
    preprocessing: PreprocessSpec,
    style_cache: Mutex<HashMap<CacheKey, StyleTarget>>,
}

impl Clone for LossNetwork {
    fn clone(&self) -> Self {
        LossNetwork {
            backbone: self.backbone.clone(),
            content_layers: self.content_layers.clone(),
            style_layers: self.style_layers.clone(),
            preprocessing: self.preprocessing,
            style_cache: Mutex::new(self.style_cache.lock().expect("cache lock").clone()),
        }
    }
}

impl LossNetwork {
    pub fn new(
        backbone: Arc<Backbone>,
        content_layers: Vec<String>,
        style_layers: Vec<String>,
        preprocessing: PreprocessSpec,
    ) -> Result<Self, LossNetError> {
        preprocessing.validate()?;
        let net = LossNetwork {
            backbone,
            content_layers,
            style_layers,
            preprocessing,
            style_cache: Mutex::new(HashMap::new()),
        };
        for id in net.content_layers.iter().chain(&net.style_layers) {
            net.layer_index(id)?;
        }
        Ok(net)
    }

    /// Default layer sets and preprocessing on top of `backbone`.
    pub fn with_defaults(backbone: Backbone) -> Self {
        Self::new(
            Arc::new(backbone),
            default_content_layers(),
            default_style_layers(),
            PreprocessSpec::default(),
        )
        .expect("default layers exist in every VGG backbone")
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_id(&self) -> &str {
        self.backbone.id()
    }

    pub fn weights_hash(&self) -> String {
        self.backbone.weights_hash()
    }

    pub fn content_layers(&self) -> &[String] {
        &self.content_layers
    }

    pub fn style_layers(&self) -> &[String] {
        &self.style_layers
    }

    pub fn preprocessing(&self) -> &PreprocessSpec {
        &self.preprocessing
    }

    pub fn settings(&self) -> LossNetSettings {
        LossNetSettings {
            backbone_id: self.backbone_id().to_string(),
            weights_sha256: self.weights_hash(),
            content_layers: self.content_layers.clone(),
            style_layers: self.style_layers.clone(),
            preprocessing: self.preprocessing,
        }
    }

    fn layer_index(&self, id: &str) -> Result<usize, LossNetError> {
        self.backbone
            .spec()
            .layer(id)
            .map(|(i, _)| i)
            .ok_or_else(|| LossNetError::UnknownLayer {
                id: id.to_string(),
                available: self
                    .backbone
                    .spec()
                    .layers()
                    .iter()
                    .map(|l| l.id.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<(), LossNetError> {
        let [_, c, h, w] = shape;
        if c != 3 {
            return Err(LossNetError::Channels(c));
        }
        if h < MIN_IMAGE_SIZE || w < MIN_IMAGE_SIZE {
            return Err(LossNetError::ImageTooSmall {
                height: h,
                width: w,
                min: MIN_IMAGE_SIZE,
            });
        }
        Ok(())
    }

    /// Runs the backbone on `input` (a `[0, 255]` RGB batch already on the
    /// graph) and returns the activation node of each requested layer.
    pub fn tap(
        &self,
        g: &mut Graph,
        input: Var,
        layers: &[String],
    ) -> Result<Vec<Var>, LossNetError> {
        self.tap_with(g, input, layers, ValueRange::Byte, ColorSpace::Rgb)
    }

    fn tap_with(
        &self,
        g: &mut Graph,
        input: Var,
        layers: &[String],
        range: ValueRange,
        color: ColorSpace,
    ) -> Result<Vec<Var>, LossNetError> {
        self.check_input(g.value(input).shape())?;
        let idx = layers
            .iter()
            .map(|id| self.layer_index(id))
            .collect::<Result<Vec<_>, _>>()?;
        let Some(&last) = idx.iter().max() else {
            return Ok(Vec::new());
        };
        let x = self.preprocessing.apply(g, input, range, color);
        let outs = self.backbone.forward(g, x, last);
        Ok(idx.into_iter().map(|i| outs[i]).collect())
    }

    /// Feature maps of every image in a batch. Duplicate layer ids are
    /// collapsed, keeping first-occurrence order.
    pub fn extract_batch(
        &self,
        image: &ImageTensor,
        layers: &[String],
    ) -> Result<Vec<FeatureMapSet>, LossNetError> {
        let mut uniq: Vec<String> = Vec::new();
        for l in layers {
            if !uniq.contains(l) {
                uniq.push(l.clone());
            }
        }
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let taps = self.tap_with(&mut g, x, &uniq, image.range(), image.color())?;
        let mut sets = Vec::with_capacity(image.batch());
        for b in 0..image.batch() {
            let maps = uniq
                .iter()
                .zip(&taps)
                .map(|(id, v)| feature_map(id, g.value(*v), b))
                .collect::<Result<Vec<_>, _>>()?;
            sets.push(FeatureMapSet::new(maps, (image.height(), image.width())));
        }
        Ok(sets)
    }

    /// Feature maps of a single image.
    pub fn extract_features(
        &self,
        image: &ImageTensor,
        layers: &[String],
    ) -> Result<FeatureMapSet, LossNetError> {
        if image.batch() != 1 {
            return Err(LossNetError::NotSingle(image.batch()));
        }
        Ok(self.extract_batch(image, layers)?.remove(0))
    }

    /// Gram targets of `style_image` at the style layers. An empty
    /// `layer_weights` means equal weights. Results are cached per image,
    /// backbone weights, layer set and weights.
    pub fn compute_style_target(
        &self,
        style_image: &ImageTensor,
        layer_weights: &[f64],
    ) -> Result<StyleTarget, LossNetError> {
        let weights: Vec<f64> = if layer_weights.is_empty() {
            vec![1.0 / self.style_layers.len().max(1) as f64; self.style_layers.len()]
        } else {
            layer_weights.to_vec()
        };
        let key = sha256_hex(
            canonical_json(&(
                style_image.digest(),
                self.weights_hash(),
                &self.style_layers,
                weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(),
                &self.preprocessing,
            ))
            .as_bytes(),
        );
        if let Some(t) = self.style_cache.lock().expect("cache lock").get(&key) {
            return Ok(t.clone());
        }
        let target = self.fresh_style_target(style_image, &weights)?;
        self.style_cache
            .lock()
            .expect("cache lock")
            .insert(key, target.clone());
        Ok(target)
    }

    /// Same as [`compute_style_target`](Self::compute_style_target) but
    /// bypasses the cache.
    pub fn fresh_style_target(
        &self,
        style_image: &ImageTensor,
        layer_weights: &[f64],
    ) -> Result<StyleTarget, LossNetError> {
        let feats = self.extract_features(style_image, &self.style_layers)?;
        let grams = feats.maps().iter().map(gram_matrix).collect();
        if layer_weights.is_empty() {
            Ok(StyleTarget::uniform(grams)?)
        } else {
            Ok(StyleTarget::new(grams, layer_weights.to_vec())?)
        }
    }

    pub fn cached_targets(&self) -> usize {
        self.style_cache.lock().expect("cache lock").len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read weight manifest {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("weight file {0} is not listed in the manifest")]
    Unlisted(PathBuf),
    #[error("cannot read weight file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("weight file {path} is {actual} bytes, manifest says {expected}")]
    Size {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("weight file {path} hashes to {actual}, manifest says {expected}")]
    Hash {
        path: PathBuf,
        expected: String,
        actual: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// List of known weight files with their sizes and content hashes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl WeightManifest {
    /// Describes `files`, storing paths relative to `base_dir`.
    pub fn describe(base_dir: &Path, files: &[PathBuf]) -> Result<Self, ManifestError> {
        let mut entries = Vec::new();
        for f in files {
            let bytes = std::fs::read(f).map_err(|source| ManifestError::Io {
                path: f.clone(),
                source,
            })?;
            let rel = f.strip_prefix(base_dir).unwrap_or(f);
            entries.push(ManifestEntry {
                path: rel.to_string_lossy().into_owned(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        Ok(WeightManifest {
            entries,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let read_err = |message: String| ManifestError::Read {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let mut m: WeightManifest =
            serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        crate::container::write_atomic(path, format!("{text}\n").as_bytes())
    }

    /// Hash identifying the manifest contents.
    pub fn digest(&self) -> String {
        sha256_hex(canonical_json(&self.entries).as_bytes())
    }

    /// Checks that `file` is listed and matches its recorded size and hash.
    pub fn verify(&self, file: &Path) -> Result<(), ManifestError> {
        let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        let target = canon(file);
        let entry = self
            .entries
            .iter()
            .find(|e| canon(&self.base_dir.join(&e.path)) == target)
            .ok_or_else(|| ManifestError::Unlisted(file.to_path_buf()))?;
        let bytes = std::fs::read(file).map_err(|source| ManifestError::Io {
            path: file.to_path_buf(),
            source,
        })?;
        if bytes.len() as u64 != entry.bytes {
            return Err(ManifestError::Size {
                path: file.to_path_buf(),
                expected: entry.bytes,
                actual: bytes.len() as u64,
            });
        }
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(ManifestError::Hash {
                path: file.to_path_buf(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{content_loss, style_loss};

    fn tiny_net() -> LossNetwork {
        LossNetwork::with_defaults(Backbone::seeded(VggSpec::vgg16().with_width_divisor(16), 1))
    }

    fn noise(h: usize, w: usize, seed: u64) -> ImageTensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_planes(
            3,
            h,
            w,
            (0..3 * h * w)
                .map(|_| rng.random_range(0.0..255.0))
                .collect(),
        )
    }

    #[test]
    fn feature_shapes_follow_layer_strides() {
        let net = tiny_net();
        let f = net
            .extract_features(
                &noise(40, 36, 0),
                &["relu1_2".into(), "pool2".into(), "relu3_3".into()],
            )
            .unwrap();
        assert_eq!(f.get("relu1_2").unwrap().shape(), (4, 40 * 36));
        assert_eq!(f.get("pool2").unwrap().shape(), (8, 10 * 9));
        assert_eq!(f.get("relu3_3").unwrap().shape(), (16, 10 * 9));
    }

    #[test]
    fn errors_name_layer_and_minimum() {
        let net = tiny_net();
        let e = net
            .extract_features(&noise(32, 32, 0), &["relu9_9".into()])
            .unwrap_err();
        assert!(e.to_string().contains("relu9_9"));
        let e = net
            .extract_features(&noise(31, 40, 0), &["relu1_1".into()])
            .unwrap_err();
        assert!(e.to_string().contains("32"));
    }

    #[test]
    fn self_consistency_and_cache() {
        let net = tiny_net();
        let img = noise(32, 32, 5);
        let hash = net.weights_hash();
        let t = net.compute_style_target(&img, &[]).unwrap();
        let again = net.compute_style_target(&img, &[]).unwrap();
        assert_eq!(net.cached_targets(), 1);
        assert_eq!(t, again);
        assert_eq!(t, net.fresh_style_target(&img, &[]).unwrap());
        let f = net.extract_features(&img, net.style_layers()).unwrap();
        let grams: Vec<_> = f.maps().iter().map(gram_matrix).collect();
        let dims: Vec<_> = f.maps().iter().map(|m| m.shape()).collect();
        assert_eq!(style_loss(&grams, &t, &dims).unwrap(), 0.0);
        let c = net.extract_features(&img, net.content_layers()).unwrap();
        assert_eq!(content_loss(&c.maps()[0], &c.maps()[0]).unwrap(), 0.0);
        assert_eq!(net.weights_hash(), hash);
    }

    #[test]
    fn manifest_rejects_tampered_weights() {
        let dir = tempfile::tempdir().unwrap();
        let w = dir.path().join("vgg.bin");
        Backbone::seeded(VggSpec::vgg16().with_width_divisor(16), 0)
            .save(&w)
            .unwrap();
        let m = WeightManifest::describe(dir.path(), std::slice::from_ref(&w)).unwrap();
        let mp = dir.path().join("weights.json");
        m.save(&mp).unwrap();
        let loaded = WeightManifest::load(&mp).unwrap();
        loaded.verify(&w).unwrap();
        assert_eq!(loaded.digest(), m.digest());
        let mut bytes = std::fs::read(&w).unwrap();
        *bytes.last_mut().unwrap() ^= 0xff;
        std::fs::write(&w, bytes).unwrap();
        assert!(matches!(loaded.verify(&w), Err(ManifestError::Hash { .. })));
        let cfg = LossNetConfig {
            weights: Some(w),
            manifest: Some(mp),
            ..LossNetConfig::default()
        };
        assert!(cfg.build().is_err());
    }
}
