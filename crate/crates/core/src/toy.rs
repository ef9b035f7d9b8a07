//! Synthetic stand-ins for the datasets and style images: a three-class
//! shape dataset, an unlabeled photo-like corpus and procedural textures
//! named after the style gallery.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_tensor::{ImageError, ImageTensor};
use crate::losses::LossWeights;
use crate::lossnet::{LossNetConfig, LossNetError, LossNetwork};
use crate::trainer::{make_variant, train_style, StyleTrainConfig, TrainError};
use crate::transformnet::TransformNetConfig;

pub const TOY_CLASSES: [&str; 3] = ["circles", "hstripes", "vstripes"];

pub const STYLE_NAMES: [&str; 8] = [
    "Snow",
    "RainPrincess",
    "Scream",
    "Wave",
    "Sunflower",
    "LAMuse",
    "Udnie",
    "YourName",
];

fn rgb_image(size: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> ImageTensor {
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let px = f(y, x);
            for c in 0..3 {
                data[(c * size + y) * size + x] = px[c].clamp(0.0, 255.0).round();
            }
        }
    }
    ImageTensor::from_planes(3, size, size, data)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(20.0..235.0),
        rng.random_range(20.0..235.0),
        rng.random_range(20.0..235.0),
    ]
}

/// One image of class `class` (index into [`TOY_CLASSES`]). Colours,
/// frequencies, phases and noise vary with `seed`.
pub fn toy_image(class: usize, size: usize, seed: u64) -> ImageTensor {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let fg = random_color(&mut rng);
    let bg = random_color(&mut rng);
    let period = rng.random_range(5.0..11.0) * size as f64 / 32.0;
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cy, cx) = (
        rng.random_range(0.3..0.7) * size as f64,
        rng.random_range(0.3..0.7) * size as f64,
    );
    let noise = 18.0;
    let mut nrng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    rgb_image(size, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let s = match class % 3 {
            0 => ((yf - cy).hypot(xf - cx) * 2.0 * PI / period + phase).sin(),
            1 => (yf * 2.0 * PI / period + phase).sin(),
            _ => (xf * 2.0 * PI / period + phase).sin(),
        };
        let t = 0.5 + 0.5 * s;
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = bg[c] + t * (fg[c] - bg[c]) + nrng.random_range(-noise..noise);
        }
        px
    })
}

/// Smooth photo-like image: a few coloured blobs over a gradient.
pub fn corpus_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = random_color(&mut rng);
    let bottom = random_color(&mut rng);
    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                random_color(&mut rng),
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                rng.random_range(0.1..0.35) * size as f64,
            )
        })
        .collect();
    rgb_image(size, |y, x| {
        let t = y as f64 / size as f64;
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = top[c] * (1.0 - t) + bottom[c] * t;
        }
        for (col, by, bx, r) in &blobs {
            let d = (y as f64 - by).hypot(x as f64 - bx);
            let w = (-(d * d) / (2.0 * r * r)).exp();
            for c in 0..3 {
                px[c] = px[c] * (1.0 - w) + col[c] * w;
            }
        }
        px
    })
}

/// Procedural texture for a style name. Unknown names get a texture
/// seeded by the name's bytes.
pub fn style_texture(name: &str, size: usize) -> ImageTensor {
    let seed = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (f1, f2) = (rng.random_range(3.0..9.0), rng.random_range(3.0..9.0));
    let c1 = random_color(&mut rng);
    let c2 = random_color(&mut rng);
    let c3 = random_color(&mut rng);
    let kind = STYLE_NAMES
        .iter()
        .position(|n| *n == name)
        .unwrap_or(seed as usize % 8);
    let mut nrng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    rgb_image(size, |y, x| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let t = match kind {
            // sparse bright speckles
            0 => {
                if nrng.random_range(0.0..1.0) < 0.08 {
                    1.0
                } else {
                    0.15 * v
                }
            }
            // diagonal streaks
            1 => 0.5 + 0.5 * ((u + v) * f1 * 2.0 * PI).sin() * (v * f2 * PI).cos(),
            // swirling bands
            2 => {
                let r = (u - 0.5).hypot(v - 0.5);
                0.5 + 0.5 * (r * f1 * 4.0 * PI + (v - 0.5).atan2(u - 0.5) * 3.0).sin()
            }
            // travelling waves
            3 => 0.5 + 0.5 * (u * f1 * 2.0 * PI + 2.0 * (v * f2 * 2.0 * PI).sin()).sin(),
            // radial petals
            4 => {
                let a = (v - 0.5).atan2(u - 0.5);
                0.5 + 0.5 * (a * f1.round() * 2.0).cos()
            }
            // blocky cubist patches
            5 => {
                let (bu, bv) = ((u * f1).floor(), (v * f2).floor());
                ((bu * 12.9898 + bv * 78.233).sin() * 43758.5453)
                    .fract()
                    .abs()
            }
            // interlocking arcs
            6 => 0.5 + 0.5 * ((u * f1 * PI).sin() * (v * f2 * PI).sin() * 3.0).sin(),
            // soft gradient sky with clouds
            _ => {
                let c = (u * f1 * PI).sin() * (v * f2 * 0.5 * PI).cos();
                (0.6 * (1.0 - v) + 0.4 * c.max(0.0)).clamp(0.0, 1.0)
            }
        };
        let mut px = [0.0; 3];
        for c in 0..3 {
            let base = c1[c] * (1.0 - t) + c2[c] * t;
            px[c] = 0.8 * base + 0.2 * c3[c] * (1.0 - (t - 0.5).abs());
        }
        px
    })
}

/// Writes `per_class` PNGs per class under `root/<class>/`. Returns the
/// written paths.
pub fn write_toy_dataset(
    root: &Path,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, ImageError> {
    let mut out = Vec::new();
    for (c, name) in TOY_CLASSES.iter().enumerate().take(classes) {
        for i in 0..per_class {
            let p = root.join(name).join(format!("{name}_{i:03}.png"));
            toy_image(c, size, seed.wrapping_mul(100_003).wrapping_add(i as u64)).save_png(&p)?;
            out.push(p);
        }
    }
    Ok(out)
}

/// Writes `count` unlabeled corpus images to `dir`.
pub fn write_corpus(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, ImageError> {
    (0..count)
        .map(|i| {
            let p = dir.join(format!("photo_{i:03}.png"));
            corpus_image(size, seed.wrapping_mul(7919).wrapping_add(i as u64)).save_png(&p)?;
            Ok(p)
        })
        .collect()
}

/// Writes `<name>.png` for each style name.
pub fn write_styles(dir: &Path, names: &[&str], size: usize) -> Result<Vec<PathBuf>, ImageError> {
    names
        .iter()
        .map(|n| {
            let p = dir.join(format!("{n}.png"));
            style_texture(n, size).save_png(&p)?;
            Ok(p)
        })
        .collect()
}

/// Writes `count` unlabeled images drawn from the toy classes (cycling
/// through them) to `dir`, for use as a style-training corpus in the
/// dataset's own domain.
pub fn write_toy_corpus(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, ImageError> {
    (0..count)
        .map(|i| {
            let p = dir.join(format!("content_{i:03}.png"));
            let s = seed.wrapping_mul(7919).wrapping_add(1_000_000 + i as u64);
            toy_image(i % TOY_CLASSES.len(), size, s).save_png(&p)?;
            Ok(p)
        })
        .collect()
}

/// Settings for [`train_style_models`]: a small transform network trained
/// briefly, so a full style gallery takes a couple of minutes on one core.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyStyleSettings {
    pub image_size: usize,
    pub corpus_images: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub content_layers: Vec<String>,
    pub net: TransformNetConfig,
    pub seed: u64,
}

impl Default for ToyStyleSettings {
    fn default() -> Self {
        ToyStyleSettings {
            image_size: 32,
            corpus_images: 12,
            steps: 300,
            batch_size: 2,
            learning_rate: 3e-3,
            weights: LossWeights {
                lambda_content: 1.0,
                lambda_style: 3.0,
                lambda_tv: 0.0,
            },
            content_layers: vec!["relu1_2".into()],
            net: TransformNetConfig {
                num_residual_blocks: 2,
                base_channels: 16,
                ..TransformNetConfig::default()
            },
            seed: 0,
        }
    }
}

impl ToyStyleSettings {
    /// The default loss network tapped at these settings' content layers.
    pub fn loss_network(&self) -> Result<LossNetwork, LossNetError> {
        LossNetConfig {
            content_layers: self.content_layers.clone(),
            ..LossNetConfig::default()
        }
        .build()
    }
}

/// Splits a gallery name into its base style and content-weight scale:
/// `Wave2` is `Wave` trained with twice the content weight.
pub fn parse_variant(name: &str) -> (&str, f64) {
    let base = name.trim_end_matches(|c: char| c.is_ascii_digit());
    match name[base.len()..].parse::<u32>() {
        Ok(k) if k > 0 && !base.is_empty() => (base, k as f64),
        _ => (name, 1.0),
    }
}

/// Writes procedural style images and a toy-domain corpus under `work`,
/// trains one network per name and saves `<out_dir>/<name>.ckpt`.
/// Existing checkpoints are kept. Names with a numeric suffix are
/// content-weight variants (see [`parse_variant`]).
pub fn train_style_models(
    names: &[&str],
    work: &Path,
    out_dir: &Path,
    settings: &ToyStyleSettings,
) -> Result<Vec<PathBuf>, TrainError> {
    let corpus = work.join("corpus");
    let images = work.join("style_images");
    let io = |e: ImageError| TrainError::Config(e.to_string());
    write_toy_corpus(
        &corpus,
        settings.corpus_images,
        settings.image_size,
        settings.seed,
    )
    .map_err(io)?;
    let loss_net = settings.loss_network()?;
    let mut out = Vec::new();
    for name in names {
        let ckpt = out_dir.join(format!("{name}.ckpt"));
        if !ckpt.exists() {
            let (base, scale) = parse_variant(name);
            let style = write_styles(&images, &[base], settings.image_size * 2).map_err(io)?;
            log::info!("training toy style `{name}`");
            let mut cfg = StyleTrainConfig::new(base, style[0].clone(), corpus.clone());
            cfg.steps = settings.steps;
            cfg.batch_size = settings.batch_size;
            cfg.image_size = settings.image_size;
            cfg.seed = settings.seed;
            cfg.learning_rate = settings.learning_rate;
            cfg.weights = settings.weights;
            cfg.log_every = settings.steps;
            let cfg = make_variant(&cfg, scale)?;
            train_style(&cfg, &settings.net, &loss_net, &ckpt)?;
        }
        out.push(ckpt);
    }
    Ok(out)
}
