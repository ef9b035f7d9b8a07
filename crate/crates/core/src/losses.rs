//! Perceptual losses: feature reconstruction (content), Gram-matrix style
//! reconstruction, total variation and their weighted combination.
//!
//! Everything is computed in double precision and every loss ships with
//! its analytic gradient, so the same code serves the iterative optimizer,
//! the feed-forward trainer and the finite-difference checks.

use serde::{Deserialize, Serialize};

use crate::image_tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("{what}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        what: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{what}: layer `{left}` paired with `{right}`")]
    LayerIdMismatch {
        what: &'static str,
        left: String,
        right: String,
    },
    #[error("style layers do not line up: missing {missing:?}, unexpected {unexpected:?}")]
    LayerSetMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("{what} must be finite")]
    NonFinite { what: &'static str },
    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),
    #[error("invalid style target: {0}")]
    InvalidStyleTarget(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// Activations of one loss-network layer for one image: `channels` rows of
/// `positions` values, each row the row-major flattening of a spatial map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    layer_id: String,
    channels: usize,
    positions: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        layer_id: impl Into<String>,
        channels: usize,
        positions: usize,
        data: Vec<f64>,
    ) -> Result<Self, LossError> {
        if channels == 0 || positions == 0 {
            return Err(LossError::InvalidFeatureMap(format!(
                "needs at least one channel and one position, got {channels}×{positions}"
            )));
        }
        if data.len() != channels * positions {
            return Err(LossError::InvalidFeatureMap(format!(
                "{} values for {channels}×{positions}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LossError::NonFinite {
                what: "feature map entries",
            });
        }
        Ok(FeatureMap {
            layer_id: layer_id.into(),
            channels,
            positions,
            data,
        })
    }

    pub fn from_rows(layer_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self, LossError> {
        let channels = rows.len();
        let positions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != positions) {
            return Err(LossError::InvalidFeatureMap("ragged rows".into()));
        }
        Self::new(layer_id, channels, positions, rows.concat())
    }

    /// `N_l`
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `M_l`
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.positions)
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.positions..(i + 1) * self.positions]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.positions + j]
    }

    fn same_shape(&self, other: &FeatureMap, what: &'static str) -> Result<(), LossError> {
        if self.shape() != other.shape() {
            return Err(LossError::ShapeMismatch {
                what,
                left: self.shape(),
                right: other.shape(),
            });
        }
        if self.layer_id != other.layer_id {
            return Err(LossError::LayerIdMismatch {
                what,
                left: self.layer_id.clone(),
                right: other.layer_id.clone(),
            });
        }
        Ok(())
    }

    // Gradient carriers share the map's shape and layer id but may hold
    // values a validated map never would; skip the finiteness check.
    fn gradient_like(&self, data: Vec<f64>) -> FeatureMap {
        FeatureMap {
            layer_id: self.layer_id.clone(),
            channels: self.channels,
            positions: self.positions,
            data,
        }
    }
}

/// Channel correlation matrix `G = F·Fᵀ` of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    layer_id: String,
    size: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    /// `N_l`
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    /// Builds a Gram matrix from raw values (used for targets loaded from
    /// elsewhere and for tests). Must be square.
    pub fn from_data(
        layer_id: impl Into<String>,
        size: usize,
        data: Vec<f64>,
    ) -> Result<Self, LossError> {
        if size == 0 || data.len() != size * size {
            return Err(LossError::InvalidStyleTarget(format!(
                "{} values for a {size}×{size} Gram matrix",
                data.len()
            )));
        }
        Ok(GramMatrix {
            layer_id: layer_id.into(),
            size,
            data,
        })
    }
}

/// Per-layer Gram targets and the weights `w_l` combining them.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTarget {
    grams: Vec<GramMatrix>,
    layer_weights: Vec<f64>,
}

impl StyleTarget {
    pub fn new(grams: Vec<GramMatrix>, layer_weights: Vec<f64>) -> Result<Self, LossError> {
        if grams.is_empty() {
            return Err(LossError::InvalidStyleTarget("no style layers".into()));
        }
        if grams.len() != layer_weights.len() {
            return Err(LossError::InvalidStyleTarget(format!(
                "{} Gram matrices but {} layer weights",
                grams.len(),
                layer_weights.len()
            )));
        }
        if layer_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::InvalidStyleTarget(
                "layer weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = layer_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LossError::InvalidStyleTarget(format!(
                "layer weights sum to {sum}, expected 1"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &grams {
            if !seen.insert(g.layer_id.as_str()) {
                return Err(LossError::InvalidStyleTarget(format!(
                    "layer `{}` appears twice",
                    g.layer_id
                )));
            }
        }
        Ok(StyleTarget {
            grams,
            layer_weights,
        })
    }

    /// Equal weights `1/L` over the given layers.
    pub fn uniform(grams: Vec<GramMatrix>) -> Result<Self, LossError> {
        let n = grams.len().max(1);
        Self::new(grams, vec![1.0 / n as f64; n])
    }

    pub fn grams(&self) -> &[GramMatrix] {
        &self.grams
    }

    pub fn layer_weights(&self) -> &[f64] {
        &self.layer_weights
    }

    pub fn layer_ids(&self) -> Vec<&str> {
        self.grams.iter().map(|g| g.layer_id.as_str()).collect()
    }

    fn position(&self, layer_id: &str) -> Option<usize> {
        self.grams.iter().position(|g| g.layer_id == layer_id)
    }
}

/// `λc`, `λs`, `λTV` of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_content: f64,
    pub lambda_style: f64,
    pub lambda_tv: f64,
}

impl LossWeights {
    pub fn new(lambda_content: f64, lambda_style: f64, lambda_tv: f64) -> Result<Self, LossError> {
        let w = LossWeights {
            lambda_content,
            lambda_style,
            lambda_tv,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.lambda_content, self.lambda_style, self.lambda_tv];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LossError::InvalidWeights(format!(
                "weights must be finite and nonnegative, got {all:?}"
            )));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(LossError::InvalidWeights(
                "all three weights are zero".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_content: 7.5,
            lambda_style: 100.0,
            lambda_tv: 200.0,
        }
    }
}

/// `½·Σ (F − P)²`
pub fn content_loss(f: &FeatureMap, p: &FeatureMap) -> Result<f64, LossError> {
    f.same_shape(p, "content loss")?;
    Ok(0.5
        * f.data
            .iter()
            .zip(&p.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// Content loss and its gradient `F − P` with respect to `f`.
pub fn content_loss_grad(f: &FeatureMap, p: &FeatureMap) -> Result<(f64, FeatureMap), LossError> {
    let loss = content_loss(f, p)?;
    let grad = f.data.iter().zip(&p.data).map(|(a, b)| a - b).collect();
    Ok((loss, f.gradient_like(grad)))
}

/// `G[i][j] = Σ_k F[i][k]·F[j][k]`, unnormalised.
///
/// Only the upper triangle is accumulated; the lower one is mirrored so the
/// result is exactly symmetric.
pub fn gram_matrix(f: &FeatureMap) -> GramMatrix {
    let n = f.channels;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let ri = f.row(i);
        for j in i..n {
            let v: f64 = ri.iter().zip(f.row(j)).map(|(a, b)| a * b).sum();
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    GramMatrix {
        layer_id: f.layer_id.clone(),
        size: n,
        data,
    }
}

fn gram_shape_check(g: &GramMatrix, a: &GramMatrix) -> Result<(), LossError> {
    if g.size != a.size {
        return Err(LossError::ShapeMismatch {
            what: "layer style loss",
            left: (g.size, g.size),
            right: (a.size, a.size),
        });
    }
    Ok(())
}

/// `E_l = Σ (G − A)² / (4·N²·M²)`
pub fn layer_style_loss(
    g: &GramMatrix,
    a: &GramMatrix,
    channels: usize,
    positions: usize,
) -> Result<f64, LossError> {
    gram_shape_check(g, a)?;
    if channels != g.size {
        return Err(LossError::ShapeMismatch {
            what: "layer style loss (N_l vs Gram size)",
            left: (channels, channels),
            right: (g.size, g.size),
        });
    }
    if positions == 0 {
        return Err(LossError::InvalidFeatureMap(
            "M_l must be at least 1".into(),
        ));
    }
    let sse: f64 = g
        .data
        .iter()
        .zip(&a.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sse / style_norm(channels, positions))
}

fn style_norm(channels: usize, positions: usize) -> f64 {
    let (n, m) = (channels as f64, positions as f64);
    4.0 * n * n * m * m
}

/// `E_l` of the features `f` against target `a`, with `dE_l/dF = (G − A)·F / (N²·M²)`.
pub fn layer_style_loss_grad(
    f: &FeatureMap,
    a: &GramMatrix,
) -> Result<(f64, FeatureMap), LossError> {
    let g = gram_matrix(f);
    let loss = layer_style_loss(&g, a, f.channels, f.positions)?;
    let (n, m) = (f.channels, f.positions);
    let scale = 4.0 / style_norm(n, m);
    let mut grad = vec![0.0; n * m];
    for i in 0..n {
        let out = &mut grad[i * m..(i + 1) * m];
        for j in 0..n {
            let d = (g.get(i, j) - a.get(i, j)) * scale;
            if d == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(f.row(j)) {
                *o += d * v;
            }
        }
    }
    Ok((loss, f.gradient_like(grad)))
}

fn align_layers<'a, I>(ids: I, target: &StyleTarget) -> Result<Vec<usize>, LossError>
where
    I: Iterator<Item = &'a str> + Clone,
{
    let mut missing = Vec::new();
    let mut unexpected = Vec::new();
    let mut order = Vec::new();
    for id in ids.clone() {
        match target.position(id) {
            Some(k) => order.push(k),
            None => unexpected.push(id.to_string()),
        }
    }
    for g in &target.grams {
        if !ids.clone().any(|id| id == g.layer_id) {
            missing.push(g.layer_id.clone());
        }
    }
    let mut dedup = order.clone();
    dedup.sort_unstable();
    dedup.dedup();
    if !missing.is_empty() || !unexpected.is_empty() || dedup.len() != order.len() {
        return Err(LossError::LayerSetMismatch {
            missing,
            unexpected,
        });
    }
    Ok(order)
}

/// `Σ_l w_l·E_l`, pairing `current` with `target` by layer id.
pub fn style_loss(
    current: &[GramMatrix],
    target: &StyleTarget,
    dims: &[(usize, usize)],
) -> Result<f64, LossError> {
    if dims.len() != current.len() {
        return Err(LossError::InvalidStyleTarget(format!(
            "{} Gram matrices but {} (N_l, M_l) pairs",
            current.len(),
            dims.len()
        )));
    }
    let order = align_layers(current.iter().map(|g| g.layer_id.as_str()), target)?;
    let mut total = 0.0;
    for ((g, &(n, m)), k) in current.iter().zip(dims).zip(order) {
        total += target.layer_weights[k] * layer_style_loss(g, &target.grams[k], n, m)?;
    }
    Ok(total)
}

/// Style loss and per-layer gradients with respect to each feature map.
pub fn style_loss_grad(
    features: &[FeatureMap],
    target: &StyleTarget,
) -> Result<(f64, Vec<FeatureMap>), LossError> {
    let order = align_layers(features.iter().map(|f| f.layer_id.as_str()), target)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for (f, k) in features.iter().zip(order) {
        let w = target.layer_weights[k];
        let (e, mut g) = layer_style_loss_grad(f, &target.grams[k])?;
        total += w * e;
        g.data.iter_mut().for_each(|v| *v *= w);
        grads.push(g);
    }
    Ok((total, grads))
}

/// Squared anisotropic total variation summed over batch and channels:
/// horizontal plus vertical squared neighbour differences.
pub fn tv_loss(image: &ImageTensor) -> f64 {
    let [n, c, h, w] = image.shape();
    let data = image.data();
    let mut total = 0.0;
    for plane in data.chunks_exact(h * w).take(n * c) {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..w.saturating_sub(1) {
                let d = row[x + 1] - row[x];
                total += d * d;
            }
            if y + 1 < h {
                let next = &plane[(y + 1) * w..(y + 2) * w];
                for (a, b) in row.iter().zip(next) {
                    let d = b - a;
                    total += d * d;
                }
            }
        }
    }
    total
}

/// TV loss and its gradient with respect to every pixel.
pub fn tv_loss_grad(image: &ImageTensor) -> (f64, ImageTensor) {
    let [_, _, h, w] = image.shape();
    let mut grad = vec![0.0; image.len()];
    for (plane, g) in image
        .data()
        .chunks_exact(h * w)
        .zip(grad.chunks_exact_mut(h * w))
    {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if x + 1 < w {
                    let d = plane[y * w + x + 1] - v;
                    g[y * w + x] -= 2.0 * d;
                    g[y * w + x + 1] += 2.0 * d;
                }
                if y + 1 < h {
                    let d = plane[(y + 1) * w + x] - v;
                    g[y * w + x] -= 2.0 * d;
                    g[(y + 1) * w + x] += 2.0 * d;
                }
            }
        }
    }
    (tv_loss(image), image.with_data(grad))
}

/// `λc·content + λs·style + λTV·tv`
pub fn total_objective(
    content: f64,
    style: f64,
    tv: f64,
    weights: &LossWeights,
) -> Result<f64, LossError> {
    for (what, v) in [
        ("content loss", content),
        ("style loss", style),
        ("tv loss", tv),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite { what });
        }
    }
    weights.validate()?;
    Ok(weights.lambda_content * content + weights.lambda_style * style + weights.lambda_tv * tv)
}
