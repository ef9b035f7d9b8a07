//! Brute-force reference implementations and fixtures shared by the
//! integration tests and the acceptance suite.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stada::augmentor::{DatasetItem, LabeledDataset, Provenance};
use stada::image_tensor::ImageTensor;
use stada::losses::FeatureMap;
use stada::transformnet::{TrainingMeta, TransformNetConfig, TransformNetwork};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(f: &FeatureMap) -> DMatrix<f64> {
    let (n, m) = f.shape();
    DMatrix::from_fn(n, m, |i, k| f.get(i, k))
}

pub fn random_map(rng: &mut ChaCha8Rng, layer: &str, n: usize, m: usize) -> FeatureMap {
    let data = (0..n * m).map(|_| rng.random_range(-2.0..2.0)).collect();
    FeatureMap::new(layer, n, m, data).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_planes(
        c,
        h,
        w,
        (0..c * h * w)
            .map(|_| rng.random_range(0.0..255.0))
            .collect(),
    )
}

pub fn oracle_content(f: &FeatureMap, p: &FeatureMap) -> f64 {
    let d = matrix(f) - matrix(p);
    0.5 * d.iter().map(|v| v * v).sum::<f64>()
}

pub fn oracle_gram(f: &FeatureMap) -> DMatrix<f64> {
    let m = matrix(f);
    &m * m.transpose()
}

pub fn oracle_layer_style(g: &DMatrix<f64>, a: &DMatrix<f64>, n: usize, m: usize) -> f64 {
    let d = g - a;
    let sse: f64 = d.iter().map(|v| v * v).sum();
    sse / (4.0 * (n * n) as f64 * (m * m) as f64)
}

pub fn oracle_tv(img: &ImageTensor) -> f64 {
    let [b, c, h, w] = img.shape();
    let mut total = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = img.get(bi, ci, y, x);
                    if x + 1 < w {
                        total += (img.get(bi, ci, y, x + 1) - v).powi(2);
                    }
                    if y + 1 < h {
                        total += (img.get(bi, ci, y + 1, x) - v).powi(2);
                    }
                }
            }
        }
    }
    total
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Relative error of two vectors in the Euclidean norm.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step `eps`.
pub fn central_diff(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + eps;
            let up = f(&buf);
            buf[i] = x[i] - eps;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// In-memory dataset with `counts[c]` originals per class.
pub fn fake_dataset(counts: &[usize]) -> LabeledDataset {
    let mut items = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            items.push(DatasetItem {
                path: format!("class{c}/img{i:04}.png"),
                class_index: c,
                provenance: Provenance::Original,
            });
        }
    }
    LabeledDataset {
        root_dir: PathBuf::from("."),
        classes: (0..counts.len()).map(|c| format!("class{c}")).collect(),
        items,
    }
}

/// Writes an untrained style checkpoint; enough to exercise the augmentor.
pub fn dummy_style(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let cfg = TransformNetConfig {
        num_residual_blocks: 1,
        base_channels: 4,
        ..TransformNetConfig::default()
    };
    let net = TransformNetwork::build(cfg, seed).unwrap();
    let p = dir.join(format!("{name}.ckpt"));
    net.save_checkpoint(name, &TrainingMeta::default(), &p)
        .unwrap();
    p
}
