//! Metadata ingestion, stratified splitting, class weighting and image
//! preprocessing.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::ops::{Index, IndexMut};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{imageops::FilterType, DynamicImage, ImageBuffer, Rgb};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Provenance;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 7;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// The seven diagnostic categories, in fixed alphabetical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionClass {
    Akiec,
    Bcc,
    Bkl,
    Df,
    Mel,
    Nv,
    Vasc,
}

impl LesionClass {
    pub const ALL: [LesionClass; NUM_CLASSES] = [
        LesionClass::Akiec,
        LesionClass::Bcc,
        LesionClass::Bkl,
        LesionClass::Df,
        LesionClass::Mel,
        LesionClass::Nv,
        LesionClass::Vasc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            LesionClass::Akiec => "akiec",
            LesionClass::Bcc => "bcc",
            LesionClass::Bkl => "bkl",
            LesionClass::Df => "df",
            LesionClass::Mel => "mel",
            LesionClass::Nv => "nv",
            LesionClass::Vasc => "vasc",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            LesionClass::Akiec => "Actinic Keratoses",
            LesionClass::Bcc => "Basal Cell Carcinoma",
            LesionClass::Bkl => "Benign Keratosis",
            LesionClass::Df => "Dermatofibroma",
            LesionClass::Mel => "Melanoma",
            LesionClass::Nv => "Melanocytic Nevi",
            LesionClass::Vasc => "Vascular Lesions",
        }
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for LesionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|c| c.code() == s)
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

/// Per-class integer tallies indexed by [`LesionClass`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub [usize; NUM_CLASSES]);

impl ClassCounts {
    pub fn from_labels<I: IntoIterator<Item = LesionClass>>(labels: I) -> Self {
        let mut counts = ClassCounts::default();
        for label in labels {
            counts[label] += 1;
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (LesionClass, usize)> + '_ {
        LesionClass::ALL.into_iter().map(|c| (c, self[c]))
    }
}

impl Index<LesionClass> for ClassCounts {
    type Output = usize;
    fn index(&self, c: LesionClass) -> &usize {
        &self.0[c.index()]
    }
}

impl IndexMut<LesionClass> for ClassCounts {
    fn index_mut(&mut self, c: LesionClass) -> &mut usize {
        &mut self.0[c.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub label: LesionClass,
    pub split: Split,
    /// Extra CSV columns, carried through untouched.
    pub metadata: BTreeMap<String, String>,
    /// Set for synthesized copies produced by class balancing.
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    class_counts: ClassCounts,
}

impl DatasetManifest {
    /// Builds a manifest, rejecting duplicate image ids.
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::invalid(
                    "records",
                    format!("duplicate image_id {:?}", r.image_id),
                ));
            }
        }
        let class_counts = ClassCounts::from_labels(records.iter().map(|r| r.label));
        Ok(DatasetManifest {
            records,
            class_counts,
        })
    }

    /// Manifest with one unassigned record per label, ids `img_00000`... and
    /// paths under `image_dir`. Handy for count-level experiments.
    pub fn from_counts(counts: &ClassCounts, image_dir: &Path) -> Self {
        let mut records = Vec::with_capacity(counts.total());
        for (class, n) in counts.iter() {
            for _ in 0..n {
                let image_id = format!("img_{:05}", records.len());
                records.push(SampleRecord {
                    path: image_dir.join(format!("{image_id}.png")),
                    image_id,
                    label: class,
                    split: Split::Unassigned,
                    metadata: BTreeMap::new(),
                    provenance: None,
                });
            }
        }
        DatasetManifest::new(records).expect("generated ids are unique")
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<SampleRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> ClassCounts {
        self.class_counts
    }

    pub fn split_counts(&self, split: Split) -> ClassCounts {
        ClassCounts::from_labels(
            self.records
                .iter()
                .filter(|r| r.split == split)
                .map(|r| r.label),
        )
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, image_id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Overwrites split assignments from `(image_id, split)` pairs. Every
    /// record must be covered.
    pub fn with_assignment<'a, I>(mut self, assignment: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, Split)>,
    {
        let map: std::collections::HashMap<&str, Split> = assignment.into_iter().collect();
        for r in &mut self.records {
            r.split = *map.get(r.image_id.as_str()).ok_or_else(|| {
                Error::invalid(
                    "assignment",
                    format!("no split recorded for image_id {:?}", r.image_id),
                )
            })?;
        }
        Ok(self)
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "JPG"];

fn resolve_image_path(image_dir: &Path, image_id: &str) -> PathBuf {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| image_dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.exists())
        .unwrap_or_else(|| image_dir.join(format!("{image_id}.jpg")))
}

/// Reads an `image_id,dx,...` metadata CSV. Extra columns are kept as
/// opaque metadata; every record starts unassigned.
pub fn load_manifest(csv_path: &Path, image_dir: &Path) -> Result<DatasetManifest> {
    let file = File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let ingest = |reason: String| Error::Ingest {
        path: csv_path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| ingest(e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("image_id").ok_or_else(|| ingest("missing column `image_id`".into()))?;
    let dx_col = col("dx").ok_or_else(|| ingest("missing column `dx`".into()))?;

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let line = row + 2;
        let rec = result.map_err(|e| ingest(format!("line {line}: {e}")))?;
        let image_id = rec.get(id_col).unwrap_or("").trim().to_string();
        if image_id.is_empty() {
            return Err(ingest(format!("line {line}: empty image_id")));
        }
        let dx = rec.get(dx_col).unwrap_or("");
        let label: LesionClass = dx.parse().map_err(|_| {
            ingest(format!(
                "line {line}: unknown dx code {:?} for image {image_id:?}",
                dx.trim()
            ))
        })?;
        let metadata = headers
            .iter()
            .zip(rec.iter())
            .enumerate()
            .filter(|(i, _)| *i != id_col && *i != dx_col)
            .map(|(_, (k, v))| (k.to_string(), v.to_string()))
            .collect();
        records.push(SampleRecord {
            path: resolve_image_path(image_dir, &image_id),
            image_id,
            label,
            split: Split::Unassigned,
            metadata,
            provenance: None,
        });
    }
    DatasetManifest::new(records).map_err(|e| ingest(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::invalid(
                    "split",
                    format!("{name} ratio {r} must lie in (0, 1)"),
                ));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "split",
                format!("ratios sum to {sum}, expected 1"),
            ));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for a class with `n` samples.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = round_half_even(self.train * n as f64).min(n);
        let val = round_half_even(self.val * n as f64).min(n - train);
        (train, val, n - train - val)
    }
}

/// Banker's rounding, treating values within 1e-9 of a half as exact ties so
/// that products like `0.7 * 115` land on the intended tie.
pub fn round_half_even(x: f64) -> usize {
    let floor = x.floor();
    let frac = x - floor;
    let base = floor as usize;
    if (frac - 0.5).abs() < 1e-9 {
        if base.is_multiple_of(2) {
            base
        } else {
            base + 1
        }
    } else if frac > 0.5 {
        base + 1
    } else {
        base
    }
}

/// Per-class stratified split. Within each class the records (in manifest
/// order) are shuffled by a ChaCha8 stream seeded with `spec.seed`, then the
/// first `train` go to train, the next `val` to val, the rest to test.
pub fn stratified_split(manifest: DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    if let Some(r) = manifest.records.iter().find(|r| r.split != Split::Unassigned) {
        return Err(Error::invalid(
            "manifest",
            format!("record {:?} already assigned to {}", r.image_id, r.split),
        ));
    }
    let counts = manifest.class_counts;
    if let Some((c, n)) = counts.iter().find(|&(_, n)| n > 0 && n < 3) {
        return Err(Error::invalid(
            "manifest",
            format!("class {c} has {n} samples; at least 3 are needed to split it"),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = manifest.records;
    for class in LesionClass::ALL {
        let mut members: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        let (train, val, test) = spec.sizes(members.len());
        if !members.is_empty() && (val == 0 || test == 0) {
            log::warn!(
                "class {class} has {} samples; rounding leaves {} empty",
                members.len(),
                if val == 0 { "val" } else { "test" }
            );
        }
        for (rank, &i) in members.iter().enumerate() {
            records[i].split = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(DatasetManifest {
        records,
        class_counts: counts,
    })
}

/// Writes the `(image_id, label, split)` assignment CSV.
pub fn write_split_csv(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["image_id", "label", "split"])
        .map_err(|e| csv_io(path, e))?;
    for r in &manifest.records {
        w.write_record([r.image_id.as_str(), r.label.code(), r.split.as_str()])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an assignment CSV written by [`write_split_csv`] and applies it to
/// `manifest`.
pub fn apply_split_csv(manifest: DatasetManifest, path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut pairs: Vec<(String, Split)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let id = rec.get(0).unwrap_or("").to_string();
        let split: Split = rec.get(2).unwrap_or("").parse()?;
        pairs.push((id, split));
    }
    manifest.with_assignment(pairs.iter().map(|(id, s)| (id.as_str(), *s)))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Inverse-frequency class weights `w_c = N / (K * n_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; NUM_CLASSES]);

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights([1.0; NUM_CLASSES])
    }

    pub fn from_counts(counts: &ClassCounts) -> Result<Self> {
        let n: usize = counts.total();
        let k = NUM_CLASSES as f64;
        let mut weights = [0.0; NUM_CLASSES];
        for (c, n_c) in counts.iter() {
            if n_c == 0 {
                return Err(Error::invalid(
                    "class_counts",
                    format!("class {c} has no samples; its weight is undefined"),
                ));
            }
            weights[c.index()] = n as f64 / (k * n_c as f64);
        }
        Ok(ClassWeights(weights))
    }
}

impl Index<LesionClass> for ClassWeights {
    type Output = f64;
    fn index(&self, c: LesionClass) -> &f64 {
        &self.0[c.index()]
    }
}

pub fn compute_class_weights(manifest: &DatasetManifest, split: Split) -> Result<ClassWeights> {
    ClassWeights::from_counts(&manifest.split_counts(split))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelStage {
    /// Values in `[0, 1]`.
    Raw01,
    /// Channelwise ImageNet standardization applied.
    Imagenet,
}

/// An `H x W x 3` image tensor tagged with its normalization stage.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pixels: Array3<f64>,
    stage: PixelStage,
}

impl NormalizedImage {
    pub fn raw01(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "expected H x W x 3 pixels, got {:?}",
                pixels.shape()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(
                "pixels",
                format!("raw01 value {v} outside [0, 1]"),
            ));
        }
        Ok(NormalizedImage {
            pixels,
            stage: PixelStage::Raw01,
        })
    }

    /// Wraps already-standardized pixels. No range check.
    pub fn imagenet(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "expected H x W x 3 pixels, got {:?}",
                pixels.shape()
            )));
        }
        Ok(NormalizedImage {
            pixels,
            stage: PixelStage::Imagenet,
        })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn stage(&self) -> PixelStage {
        self.stage
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Applies ImageNet mean/std standardization. Only valid on raw01 input.
    pub fn standardize(&self) -> Result<NormalizedImage> {
        if self.stage != PixelStage::Raw01 {
            return Err(Error::invalid(
                "image",
                "image is already ImageNet-standardized",
            ));
        }
        let mut pixels = self.pixels.clone();
        for mut px in pixels.lanes_mut(ndarray::Axis(2)) {
            for ch in 0..3 {
                px[ch] = (px[ch] - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch];
            }
        }
        Ok(NormalizedImage {
            pixels,
            stage: PixelStage::Imagenet,
        })
    }

    /// 8-bit RGB rendering of a raw01 image.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.stage != PixelStage::Raw01 {
            return Err(Error::invalid("image", "only raw01 images can be rendered"));
        }
        let (h, w) = (self.height() as u32, self.width() as u32);
        Ok(ImageBuffer::from_fn(w, h, |x, y| {
            let p = |c| (self.pixels[[y as usize, x as usize, c]] * 255.0).round() as u8;
            Rgb([p(0), p(1), p(2)])
        }))
    }
}

/// Converts a decoded image to 8-bit RGB, stripping alpha with a warning and
/// rejecting grayscale or other layouts.
pub fn ensure_rgb(raw: &DynamicImage) -> Result<image::RgbImage> {
    match raw {
        DynamicImage::ImageRgb8(img) => Ok(img.clone()),
        DynamicImage::ImageRgba8(_) => {
            log::warn!("stripping alpha channel from RGBA input");
            Ok(raw.to_rgb8())
        }
        other => Err(Error::Image(format!(
            "expected an RGB image, got {:?}",
            other.color()
        ))),
    }
}

pub fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    ensure_rgb(&img)
}

/// Lanczos3 resize to `target = (height, width)` and scale into `[0, 1]`.
pub fn resize_raw01(raw: &image::RgbImage, target: (usize, usize)) -> Result<NormalizedImage> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("target", "target dimensions must be nonzero"));
    }
    if raw.width() == 0 || raw.height() == 0 {
        return Err(Error::invalid("raw", "image has no pixels"));
    }
    let float: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(raw.width(), raw.height(), |x, y| {
        let p = raw.get_pixel(x, y).0;
        Rgb([p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
    });
    let resized = if (raw.height() as usize, raw.width() as usize) == target {
        float
    } else {
        image::imageops::resize(&float, tw as u32, th as u32, FilterType::Lanczos3)
    };
    let pixels = Array3::from_shape_fn((th, tw, 3), |(y, x, c)| {
        (resized.get_pixel(x as u32, y as u32).0[c] as f64).clamp(0.0, 1.0)
    });
    NormalizedImage::raw01(pixels)
}

/// Full preprocessing: Lanczos resize, scale to `[0, 1]`, ImageNet
/// standardization.
pub fn preprocess_image(raw: &DynamicImage, target: (usize, usize)) -> Result<NormalizedImage> {
    let rgb = ensure_rgb(raw)?;
    resize_raw01(&rgb, target)?.standardize()
}
