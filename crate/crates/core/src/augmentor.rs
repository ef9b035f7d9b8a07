//! Directory-per-class datasets, traditional transforms and materialised
//! augmented copies with a provenance manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::write_atomic;
use crate::image_tensor::{self, ImageError, ImageTensor};
use crate::nn::reflect_index;
use crate::trainer::IMAGE_EXTENSIONS;
use crate::transformnet::{TransformNetError, TransformNetwork};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const PLAN_FILE: &str = "augment.json";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Original,
    Flip,
    /// Counterclockwise, in degrees.
    Rotation(String),
    Style(String),
}

impl Provenance {
    pub fn rotation(angle: f64) -> Self {
        Provenance::Rotation(format_angle(angle))
    }

    /// Filename-safe tag.
    pub fn tag(&self) -> String {
        match self {
            Provenance::Original => "original".into(),
            Provenance::Flip => "flip".into(),
            Provenance::Rotation(a) => format!("rot{a}"),
            Provenance::Style(s) => format!("style-{s}"),
        }
    }

    pub fn is_original(&self) -> bool {
        matches!(self, Provenance::Original)
    }
}

fn format_angle(angle: f64) -> String {
    if angle.fract() == 0.0 {
        format!("{}", angle as i64)
    } else {
        format!("{angle}")
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Original => f.write_str("original"),
            Provenance::Flip => f.write_str("flip"),
            Provenance::Rotation(a) => write!(f, "rotation({a})"),
            Provenance::Style(s) => write!(f, "style({s})"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = |prefix: &str| {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(')'))
                .map(str::to_string)
        };
        match s {
            "original" => Ok(Provenance::Original),
            "flip" => Ok(Provenance::Flip),
            _ => {
                if let Some(a) = inner("rotation(") {
                    Ok(Provenance::Rotation(a))
                } else if let Some(n) = inner("style(") {
                    Ok(Provenance::Style(n))
                } else {
                    Err(format!("unknown provenance `{s}`"))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetItem {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub class_index: usize,
    pub provenance: Provenance,
}

/// Images grouped by class. Items are sorted by path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    pub root_dir: PathBuf,
    pub classes: Vec<String>,
    pub items: Vec<DatasetItem>,
}

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("dataset root {0} has no class directory with a decodable image")]
    EmptyDataset(PathBuf),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("style checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: TransformNetError,
    },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("`{0}` and another file in the same class share a stem; output names would collide")]
    DuplicateStem(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AugmentError + '_ {
    move |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Lists `root/<class>/<image>`; classes and items are sorted. Files that
/// fail to decode are skipped and reported in the returned warnings.
pub fn scan_dataset(root: &Path) -> Result<(LabeledDataset, Vec<String>), AugmentError> {
    if !root.is_dir() {
        return Err(AugmentError::MissingRoot(root.to_path_buf()));
    }
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let mut per_class: Vec<(String, Vec<String>)> = Vec::new();
    let mut warnings = Vec::new();
    for dir in class_dirs {
        let class = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        let mut ok = Vec::new();
        for f in files {
            match image_tensor::decode(&f) {
                Ok(_) => ok.push(format!(
                    "{class}/{}",
                    f.file_name().unwrap().to_string_lossy()
                )),
                Err(e) => {
                    log::warn!("skipping {e}");
                    warnings.push(e.to_string());
                }
            }
        }
        if !ok.is_empty() {
            per_class.push((class, ok));
        }
    }
    if per_class.is_empty() {
        return Err(AugmentError::EmptyDataset(root.to_path_buf()));
    }
    let classes = per_class.iter().map(|(c, _)| c.clone()).collect();
    let mut items = Vec::new();
    for (ci, (_, files)) in per_class.into_iter().enumerate() {
        items.extend(files.into_iter().map(|path| DatasetItem {
            path,
            class_index: ci,
            provenance: Provenance::Original,
        }));
    }
    items.sort_by(|a, b| a.path.cmp(&b.path));
    Ok((
        LabeledDataset {
            root_dir: root.to_path_buf(),
            classes,
            items,
        },
        warnings,
    ))
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn path_of(&self, item: &DatasetItem) -> PathBuf {
        self.root_dir.join(&item.path)
    }

    /// Decodes item `i` as RGB resized to `size × size`.
    pub fn load(&self, i: usize, size: usize) -> Result<ImageTensor, ImageError> {
        image_tensor::load_rgb_resized(&self.path_of(&self.items[i]), size, size)
    }

    /// Item counts per class index.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for it in &self.items {
            counts[it.class_index] += 1;
        }
        counts
    }

    /// SHA-256 over class names, item paths, labels, provenance and file
    /// contents.
    pub fn content_hash(&self) -> Result<String, AugmentError> {
        let mut h = Sha256::new();
        for c in &self.classes {
            h.update(c.as_bytes());
            h.update([0]);
        }
        for it in &self.items {
            let p = self.path_of(it);
            let bytes = std::fs::read(&p).map_err(io_err(&p))?;
            h.update(format!("{}\0{}\0{}\0", it.path, it.class_index, it.provenance).as_bytes());
            h.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Reads a dataset described by an augmentation manifest; paths are
    /// relative to the manifest's directory.
    pub fn from_manifest(manifest: &Path) -> Result<Self, AugmentError> {
        let rows = read_manifest(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut classes: Vec<String> = rows.iter().map(|r| r.class.clone()).collect();
        classes.sort();
        classes.dedup();
        let mut items: Vec<DatasetItem> = rows
            .into_iter()
            .map(|r| DatasetItem {
                class_index: classes.binary_search(&r.class).expect("class listed"),
                path: r.output_path,
                provenance: r.provenance,
            })
            .collect();
        items.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(LabeledDataset {
            root_dir: root,
            classes,
            items,
        })
    }
}

/// Mirrors columns.
pub fn flip_horizontal(image: &ImageTensor) -> ImageTensor {
    let w = image.width();
    let mut out = image.clone();
    for (src, dst) in image
        .data()
        .chunks_exact(w)
        .zip(out.data_mut().chunks_exact_mut(w))
    {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

/// Rotates counterclockwise about the centre, keeping the size. Multiples
/// of 90° are exact index permutations when the result fits (any size for
/// 180°, square images for 90°/270°); other angles resample bilinearly
/// with a reflected canvas.
pub fn rotate(image: &ImageTensor, angle_deg: f64) -> ImageTensor {
    let a = angle_deg.rem_euclid(360.0);
    let [_, _, h, w] = image.shape();
    let quarter = (a / 90.0).round();
    if (a - quarter * 90.0).abs() < 1e-12 && (quarter as i64 % 2 == 0 || h == w) {
        let q = quarter as i64 % 4;
        if q == 0 {
            return image.clone();
        }
        let mut out = image.clone();
        for (src, dst) in image
            .data()
            .chunks_exact(h * w)
            .zip(out.data_mut().chunks_exact_mut(h * w))
        {
            for i in 0..h {
                for j in 0..w {
                    let (si, sj) = match q {
                        1 => (j, w - 1 - i),
                        2 => (h - 1 - i, w - 1 - j),
                        _ => (h - 1 - j, i),
                    };
                    dst[i * w + j] = src[si * w + sj];
                }
            }
        }
        return out;
    }
    let (s, c) = a.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = image.clone();
    for (src, dst) in image
        .data()
        .chunks_exact(h * w)
        .zip(out.data_mut().chunks_exact_mut(h * w))
    {
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                let sy = cy + dy * c + dx * s;
                let sx = cx - dy * s + dx * c;
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let at = |y: f64, x: f64| {
                    src[reflect_index(y as isize, h) * w + reflect_index(x as isize, w)]
                };
                dst[i * w + j] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
                    + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traditional {
    FlipHorizontal,
    Rotation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub traditional: Vec<Traditional>,
    #[serde(default)]
    pub rotation_angles: Vec<f64>,
    /// Style checkpoint files.
    #[serde(default)]
    pub styles: Vec<PathBuf>,
}

pub const DEFAULT_ROTATIONS: [f64; 3] = [90.0, 180.0, 270.0];

impl AugmentPlan {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let rot = self.traditional.contains(&Traditional::Rotation);
        if rot == self.rotation_angles.is_empty() {
            return Err(AugmentError::Plan(if rot {
                "rotation selected but no angles given".into()
            } else {
                "rotation angles given but rotation not selected".into()
            }));
        }
        if self.rotation_angles.iter().any(|a| !a.is_finite()) {
            return Err(AugmentError::Plan("rotation angles must be finite".into()));
        }
        Ok(())
    }

    /// Derived copies per original from the traditional transforms.
    pub fn traditional_expansions(&self) -> usize {
        let mut n = 0;
        if self.traditional.contains(&Traditional::FlipHorizontal) {
            n += 1;
        }
        if self.traditional.contains(&Traditional::Rotation) {
            n += self.rotation_angles.len();
        }
        n
    }

    /// Rows per original: itself plus every derived copy.
    pub fn multiplicity(&self) -> usize {
        1 + self.traditional_expansions() + self.styles.len()
    }

    /// Label in the style of the result tables: `None`, `Flipping`,
    /// `Rotation`, `FlippingRotation`.
    pub fn traditional_label(&self) -> String {
        traditional_label(&self.traditional)
    }
}

pub fn traditional_label(t: &[Traditional]) -> String {
    let mut s = String::new();
    if t.contains(&Traditional::FlipHorizontal) {
        s.push_str("Flipping");
    }
    if t.contains(&Traditional::Rotation) {
        s.push_str("Rotation");
    }
    if s.is_empty() {
        s.push_str("None");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub output_path: String,
    pub class: String,
    #[serde(with = "provenance_str")]
    pub provenance: Provenance,
    pub source_path: String,
}

mod provenance_str {
    use super::Provenance;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Provenance, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(p)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Provenance, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRef {
    pub name: String,
    pub checkpoint: PathBuf,
    pub weights_sha256: String,
}

/// Everything `build_augmented` produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub source_dataset_hash: String,
    pub plan: AugmentPlan,
    pub styles: Vec<StyleRef>,
    #[serde(skip)]
    pub rows: Vec<ManifestRow>,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), AugmentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| AugmentError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| AugmentError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, AugmentError> {
    let err = |message: String| AugmentError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    r.deserialize()
        .collect::<Result<Vec<ManifestRow>, _>>()
        .map_err(|e| err(e.to_string()))
}

struct Written {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Written {
    fn cleanup(&self) {
        for f in self.files.iter().rev() {
            let _ = std::fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

/// Materialises the plan under `out_dir` and writes `manifest.csv` plus
/// `augment.json`. Checkpoints are loaded before anything is written; on
/// any failure every file written so far is removed.
pub fn build_augmented(
    dataset: &LabeledDataset,
    plan: &AugmentPlan,
    out_dir: &Path,
) -> Result<AugmentManifest, AugmentError> {
    plan.validate()?;
    let mut styles: Vec<(StyleRef, TransformNetwork)> = Vec::new();
    for p in &plan.styles {
        let (net, header) =
            TransformNetwork::load_checkpoint(p).map_err(|source| AugmentError::Checkpoint {
                path: p.clone(),
                source,
            })?;
        if styles.iter().any(|(s, _)| s.name == header.style_name) {
            return Err(AugmentError::Plan(format!(
                "two checkpoints carry the style name `{}`",
                header.style_name
            )));
        }
        styles.push((
            StyleRef {
                name: header.style_name,
                checkpoint: p.clone(),
                weights_sha256: net.weights_hash(),
            },
            net,
        ));
    }
    let mut seen = BTreeMap::new();
    for it in &dataset.items {
        let stem = Path::new(&it.path).with_extension("");
        if seen.insert(stem.clone(), ()).is_some() {
            return Err(AugmentError::DuplicateStem(it.path.clone()));
        }
    }
    let source_hash = dataset.content_hash()?;

    let mut written = Written {
        files: Vec::new(),
        dirs: Vec::new(),
    };
    let result = materialise(dataset, plan, &styles, out_dir, &mut written);
    let rows = match result {
        Ok(rows) => rows,
        Err(e) => {
            written.cleanup();
            return Err(e);
        }
    };
    let manifest = AugmentManifest {
        source_dataset_hash: source_hash,
        plan: plan.clone(),
        styles: styles.into_iter().map(|(s, _)| s).collect(),
        rows,
    };
    let finish = (|| {
        let mp = out_dir.join(MANIFEST_FILE);
        write_manifest(&mp, &manifest.rows)?;
        written.files.push(mp);
        let pp = out_dir.join(PLAN_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("plan serializes");
        write_atomic(&pp, format!("{text}\n").as_bytes()).map_err(io_err(&pp))?;
        Ok(())
    })();
    if let Err(e) = finish {
        written.cleanup();
        return Err(e);
    }
    Ok(manifest)
}

fn materialise(
    dataset: &LabeledDataset,
    plan: &AugmentPlan,
    styles: &[(StyleRef, TransformNetwork)],
    out_dir: &Path,
    written: &mut Written,
) -> Result<Vec<ManifestRow>, AugmentError> {
    if !out_dir.exists() {
        std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        written.dirs.push(out_dir.to_path_buf());
    }
    let mut rows = Vec::with_capacity(dataset.len() * plan.multiplicity());
    for it in &dataset.items {
        let class = &dataset.classes[it.class_index];
        let class_dir = out_dir.join(class);
        if !class_dir.exists() {
            std::fs::create_dir_all(&class_dir).map_err(io_err(&class_dir))?;
            written.dirs.push(class_dir.clone());
        }
        let src = dataset.path_of(it);
        let file = Path::new(&it.path);
        let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
        let ext = file
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_else(|| "png".into());
        let mut emit = |prov: Provenance, ext: &str, bytes: &[u8]| -> Result<(), AugmentError> {
            let name = format!("{stem}__{}.{ext}", prov.tag());
            let path = class_dir.join(&name);
            write_atomic(&path, bytes).map_err(io_err(&path))?;
            written.files.push(path);
            rows.push(ManifestRow {
                output_path: format!("{class}/{name}"),
                class: class.clone(),
                provenance: prov,
                source_path: it.path.clone(),
            });
            Ok(())
        };
        let original = std::fs::read(&src).map_err(io_err(&src))?;
        emit(Provenance::Original, &ext, &original)?;
        if plan.traditional_expansions() == 0 && styles.is_empty() {
            continue;
        }
        let img = image_tensor::load_rgb(&src)?;
        if plan.traditional.contains(&Traditional::FlipHorizontal) {
            emit(
                Provenance::Flip,
                "png",
                &flip_horizontal(&img).encode_png()?,
            )?;
        }
        if plan.traditional.contains(&Traditional::Rotation) {
            for &a in &plan.rotation_angles {
                emit(
                    Provenance::rotation(a),
                    "png",
                    &rotate(&img, a).encode_png()?,
                )?;
            }
        }
        for (s, net) in styles {
            emit(
                Provenance::Style(s.name.clone()),
                "png",
                &net.stylize(&img).encode_png()?,
            )?;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provenance_strings_round_trip() {
        for p in [
            Provenance::Original,
            Provenance::Flip,
            Provenance::rotation(90.0),
            Provenance::rotation(12.5),
            Provenance::Style("Snow".into()),
        ] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
        assert_eq!(Provenance::rotation(90.0).to_string(), "rotation(90)");
        assert!("sideways".parse::<Provenance>().is_err());
    }

    #[test]
    fn right_angle_rotation_oracle() {
        let img = ImageTensor::from_planes(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rotate(&img, 90.0).data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rotate(&img, 180.0).data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(rotate(&img, 270.0).data(), &[3.0, 1.0, 4.0, 2.0]);
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(rotate(&img, 360.0), img);
    }

    #[test]
    fn arbitrary_angle_agrees_with_exact_path_at_right_angles() {
        let img = ImageTensor::from_planes(1, 5, 5, (0..25).map(f64::from).collect());
        let nearly = rotate(&img, 90.0 + 1e-9);
        for (a, b) in nearly.data().iter().zip(rotate(&img, 90.0).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn plan_validation() {
        let mut p = AugmentPlan {
            traditional: vec![Traditional::Rotation],
            ..Default::default()
        };
        assert!(p.validate().is_err());
        p.rotation_angles = DEFAULT_ROTATIONS.to_vec();
        p.validate().unwrap();
        assert_eq!(p.multiplicity(), 4);
        assert_eq!(p.traditional_label(), "Rotation");
        p.traditional.push(Traditional::FlipHorizontal);
        assert_eq!(p.traditional_label(), "FlippingRotation");
    }
}
