//! Batched image data in double precision with explicit layout metadata.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{reflect_index, Tensor};

/// Numeric range the pixel values live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 255]`
    Byte,
    /// `[0, 1]`
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Rgb,
    Bgr,
    Gray,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("cannot encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("cannot save a {channels}-channel batch of {batch} as a single image")]
    Unsupported { batch: usize, channels: usize },
}

/// NCHW image batch. Layout is fixed; range and colour space travel with
/// the data so consumers never have to guess.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    shape: [usize; 4],
    data: Vec<f64>,
    range: ValueRange,
    color: ColorSpace,
}

impl ImageTensor {
    /// Panics if `data` does not match `shape`.
    pub fn new(shape: [usize; 4], data: Vec<f64>, range: ValueRange, color: ColorSpace) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "image data length does not match shape {shape:?}"
        );
        ImageTensor {
            shape,
            data,
            range,
            color,
        }
    }

    /// Single image in the `[0, 255]` range; colour space follows the
    /// channel count (1 → gray, otherwise RGB).
    pub fn from_planes(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        let color = if channels == 1 {
            ColorSpace::Gray
        } else {
            ColorSpace::Rgb
        };
        Self::new([1, channels, height, width], data, ValueRange::Byte, color)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        let color = if shape[1] == 1 {
            ColorSpace::Gray
        } else {
            ColorSpace::Rgb
        };
        Self::new(
            shape,
            vec![value; shape.iter().product()],
            ValueRange::Byte,
            color,
        )
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(b, c, y, x);
        self.data[i] = v;
    }

    /// Same metadata, new data.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        Self::new(self.shape, data, self.range, self.color)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        self.with_data(self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn item(&self, b: usize) -> ImageTensor {
        let n = self.shape[1] * self.shape[2] * self.shape[3];
        ImageTensor::new(
            [1, self.shape[1], self.shape[2], self.shape[3]],
            self.data[b * n..(b + 1) * n].to_vec(),
            self.range,
            self.color,
        )
    }

    /// Concatenates along the batch axis; all items must share shape and metadata.
    pub fn stack(items: &[ImageTensor]) -> ImageTensor {
        assert!(!items.is_empty());
        let first = &items[0];
        let mut data = Vec::new();
        let mut batch = 0;
        for it in items {
            assert_eq!(it.shape[1..], first.shape[1..]);
            assert_eq!((it.range, it.color), (first.range, first.color));
            data.extend_from_slice(&it.data);
            batch += it.shape[0];
        }
        let [_, c, h, w] = first.shape;
        ImageTensor::new([batch, c, h, w], data, first.range, first.color)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape, self.data.iter().map(|v| *v as f32).collect())
    }

    pub fn from_tensor(t: &Tensor, range: ValueRange, color: ColorSpace) -> Self {
        Self::new(
            t.shape(),
            t.data().iter().map(|v| *v as f64).collect(),
            range,
            color,
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            })
    }

    /// SHA-256 over shape, metadata and pixel values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in self.shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update(format!("{:?}/{:?}", self.range, self.color).as_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// RGB byte-range image from an 8-bit buffer.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64;
            }
        }
        Self::from_planes(3, h, w, data)
    }

    /// Rounds and clamps to 8 bits. Single-item batches only.
    pub fn to_dynamic(&self) -> Result<DynamicImage, ImageError> {
        let [b, c, h, w] = self.shape;
        let scale = match self.range {
            ValueRange::Byte => 1.0,
            ValueRange::Unit => 255.0,
        };
        let q = |v: f64| (v * scale).round().clamp(0.0, 255.0) as u8;
        match (b, c) {
            (1, 3) => {
                let (ri, bi) = match self.color {
                    ColorSpace::Bgr => (2, 0),
                    _ => (0, 2),
                };
                let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    image::Rgb([
                        q(self.get(0, ri, y, x)),
                        q(self.get(0, 1, y, x)),
                        q(self.get(0, bi, y, x)),
                    ])
                });
                Ok(DynamicImage::ImageRgb8(img))
            }
            (1, 1) => {
                let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([q(self.get(0, 0, y as usize, x as usize))])
                });
                Ok(DynamicImage::ImageLuma8(img))
            }
            _ => Err(ImageError::Unsupported {
                batch: b,
                channels: c,
            }),
        }
    }

    /// Lossless PNG encoding of a single image.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let img = self.to_dynamic()?;
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| ImageError::Encode {
                path: PathBuf::from("<memory>"),
                message: e.to_string(),
            })?;
        Ok(buf.into_inner())
    }

    /// Writes a lossless PNG atomically, creating parent directories.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.encode_png()?;
        crate::container::write_atomic(path, &bytes).map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Same pixels as a `[0, 255]` RGB batch: gray is replicated, BGR is
    /// reordered, unit range is rescaled.
    pub fn to_rgb_byte(&self) -> ImageTensor {
        let [n, c, h, w] = self.shape;
        let scale = match self.range {
            ValueRange::Byte => 1.0,
            ValueRange::Unit => 255.0,
        };
        let src: [usize; 3] = match (c, self.color) {
            (1, _) => [0, 0, 0],
            (_, ColorSpace::Bgr) => [2, 1, 0],
            _ => [0, 1, 2],
        };
        let hw = h * w;
        let mut data = Vec::with_capacity(n * 3 * hw);
        for b in 0..n {
            for s in src {
                let off = (b * c + s) * hw;
                data.extend(self.data[off..off + hw].iter().map(|v| v * scale));
            }
        }
        ImageTensor::new([n, 3, h, w], data, ValueRange::Byte, ColorSpace::Rgb)
    }

    /// Reflection-pads every plane (edge sample not repeated).
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> ImageTensor {
        let [n, c, h, w] = self.shape;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in self.data.chunks_exact(h * w) {
            for y in 0..oh {
                let sy = reflect_index(y as isize - top as isize, h);
                for x in 0..ow {
                    let sx = reflect_index(x as isize - left as isize, w);
                    data.push(plane[sy * w + sx]);
                }
            }
        }
        ImageTensor::new([n, c, oh, ow], data, self.range, self.color)
    }

    /// Window of `height × width` starting at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> ImageTensor {
        let [n, c, h, w] = self.shape;
        assert!(top + height <= h && left + width <= w, "crop outside image");
        let mut data = Vec::with_capacity(n * c * height * width);
        for plane in self.data.chunks_exact(h * w) {
            for y in top..top + height {
                data.extend_from_slice(&plane[y * w + left..y * w + left + width]);
            }
        }
        ImageTensor::new([n, c, height, width], data, self.range, self.color)
    }

    /// Resamples an RGB or gray byte image with a triangle filter.
    pub fn resized(&self, height: usize, width: usize) -> Result<ImageTensor, ImageError> {
        if (self.height(), self.width()) == (height, width) {
            return Ok(self.clone());
        }
        let img =
            self.to_dynamic()?
                .resize_exact(width as u32, height as u32, FilterType::Triangle);
        Ok(match self.channels() {
            1 => {
                let g = img.to_luma8();
                let data = g.pixels().map(|p| p.0[0] as f64).collect();
                ImageTensor::from_planes(1, height, width, data)
            }
            _ => ImageTensor::from_rgb8(&img.to_rgb8()),
        })
    }
}

pub fn decode(path: &Path) -> Result<DynamicImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    image::load_from_memory(&bytes).map_err(|e| ImageError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a PNG or JPEG as an RGB image in `[0, 255]`.
pub fn load_rgb(path: &Path) -> Result<ImageTensor, ImageError> {
    Ok(ImageTensor::from_rgb8(&decode(path)?.to_rgb8()))
}

/// Loads and resizes (aspect ratio is not preserved).
pub fn load_rgb_resized(
    path: &Path,
    height: usize,
    width: usize,
) -> Result<ImageTensor, ImageError> {
    let img = decode(path)?.resize_exact(width as u32, height as u32, FilterType::Triangle);
    Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
}
