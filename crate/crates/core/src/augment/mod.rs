//! Class balancing by augmented upsampling, the stochastic training-time
//! augmentation pipeline, and MixUp.

pub mod ops;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ClassCounts, DatasetManifest, LesionClass, NormalizedImage, PixelStage, SampleRecord, Split,
    NUM_CLASSES,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingPlan {
    pub fraction: f64,
    pub targets: ClassCounts,
    pub to_generate: ClassCounts,
}

impl BalancingPlan {
    pub fn total(&self) -> usize {
        self.targets.total()
    }

    /// Counts the plan was computed from.
    pub fn base_counts(&self) -> ClassCounts {
        let mut base = ClassCounts::default();
        for c in LesionClass::ALL {
            base[c] = self.targets[c] - self.to_generate[c];
        }
        base
    }
}

/// Raise every class to at least `round(fraction * n_max)` samples.
pub fn balancing_plan(class_counts: &ClassCounts, fraction: f64) -> Result<BalancingPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(
            "fraction",
            format!("{fraction} must lie in (0, 1]"),
        ));
    }
    let n_max = class_counts.max();
    if n_max == 0 {
        return Err(Error::invalid("class_counts", "all classes are empty"));
    }
    let floor = (fraction * n_max as f64).round() as usize;
    let mut targets = ClassCounts::default();
    let mut to_generate = ClassCounts::default();
    for (c, n) in class_counts.iter() {
        targets[c] = n.max(floor);
        to_generate[c] = targets[c] - n;
    }
    Ok(BalancingPlan {
        fraction,
        targets,
        to_generate,
    })
}

/// The deterministic transform applied to produce one balancing copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub hue_deg: f64,
    pub saturation: f64,
    pub value: f64,
}

impl BalanceTransform {
    pub fn identity() -> Self {
        BalanceTransform {
            hflip: false,
            vflip: false,
            rotation_deg: 0.0,
            hue_deg: 0.0,
            saturation: 0.0,
            value: 0.0,
        }
    }

    /// Draws a non-empty composition from {rotation, flips, HSV shift}.
    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut t = BalanceTransform::identity();
        let (use_rot, use_flip, use_hsv) = loop {
            let picks = (rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5));
            if picks.0 || picks.1 || picks.2 {
                break picks;
            }
        };
        if use_rot && cfg.rotation_deg > 0.0 {
            t.rotation_deg = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
        }
        if use_flip {
            match rng.random_range(0..3) {
                0 => t.hflip = true,
                1 => t.vflip = true,
                _ => {
                    t.hflip = true;
                    t.vflip = true;
                }
            }
        }
        if use_hsv {
            let (h, s, v) = cfg.hsv_shift;
            t.hue_deg = symmetric(rng, h);
            t.saturation = symmetric(rng, s);
            t.value = symmetric(rng, v);
        }
        t
    }

    pub fn apply(&self, img: &NormalizedImage) -> Result<NormalizedImage> {
        require_raw01(img)?;
        let mut px = img.pixels().clone();
        if self.hflip {
            px = ops::hflip(&px);
        }
        if self.vflip {
            px = ops::vflip(&px);
        }
        if self.rotation_deg != 0.0 {
            px = ops::rotate(&px, self.rotation_deg);
        }
        if self.hue_deg != 0.0 || self.saturation != 0.0 || self.value != 0.0 {
            px = ops::hsv_shift(&px, self.hue_deg, self.saturation, self.value);
        }
        px.mapv_inplace(|v| v.clamp(0.0, 1.0));
        NormalizedImage::raw01(px)
    }
}

fn symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_image_id: String,
    pub transform: BalanceTransform,
}

/// Per-copy seed derived from the global seed, the class and the copy index.
pub fn copy_seed(seed: u64, class: LesionClass, copy: usize) -> u64 {
    let mut z = seed
        ^ ((class.index() as u64 + 1) << 56)
        ^ (copy as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Appends `plan.to_generate[c]` synthetic train records per class. Each copy
/// picks a source among the class's original train records and records the
/// transform it would apply; originals are untouched.
pub fn materialize_balanced(
    manifest: &DatasetManifest,
    plan: &BalancingPlan,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let originals = |c: LesionClass| {
        manifest
            .in_split(Split::Train)
            .filter(move |r| r.label == c && r.provenance.is_none())
    };
    let base = ClassCounts::from_labels(
        manifest
            .in_split(Split::Train)
            .filter(|r| r.provenance.is_none())
            .map(|r| r.label),
    );
    if base != plan.base_counts() {
        return Err(Error::invalid(
            "plan",
            format!(
                "plan was computed from counts {:?} but the train split has {:?}",
                plan.base_counts().0,
                base.0
            ),
        ));
    }

    let mut records: Vec<SampleRecord> = manifest.records().to_vec();
    for class in LesionClass::ALL {
        let needed = plan.to_generate[class];
        if needed == 0 {
            continue;
        }
        let sources: Vec<&SampleRecord> = originals(class).collect();
        if sources.is_empty() {
            return Err(Error::invalid(
                "plan",
                format!("class {class} needs {needed} copies but has no source images"),
            ));
        }
        for copy in 0..needed {
            let mut rng = ChaCha8Rng::seed_from_u64(copy_seed(seed, class, copy));
            let source = sources[rng.random_range(0..sources.len())];
            let transform = BalanceTransform::sample(cfg, &mut rng);
            records.push(SampleRecord {
                image_id: format!("{}__bal{copy:05}", source.image_id),
                path: source.path.clone(),
                label: class,
                split: Split::Train,
                metadata: BTreeMap::new(),
                provenance: Some(Provenance {
                    source_image_id: source.image_id.clone(),
                    transform,
                }),
            });
        }
    }
    DatasetManifest::new(records)
}

/// Writes `(image_id, label, split, source_image_id, transform_json)`.
pub fn write_balanced_csv(manifest: &DatasetManifest, path: &std::path::Path) -> Result<()> {
    use crate::dataset::csv_io;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["image_id", "label", "split", "source_image_id", "transform_json"])
        .map_err(|e| csv_io(path, e))?;
    for r in manifest.records() {
        let (src, json) = match &r.provenance {
            Some(p) => (p.source_image_id.clone(), serde_json::to_string(&p.transform)?),
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.image_id.as_str(),
            r.label.code(),
            r.split.as_str(),
            src.as_str(),
            json.as_str(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotation_prob: f64,
    pub rotation_deg: f64,
    pub brightness_contrast_prob: f64,
    pub brightness_contrast: f64,
    pub hsv_prob: f64,
    /// Bounds for (hue degrees, saturation fraction, value fraction).
    pub hsv_shift: (f64, f64, f64),
    pub noise_prob: f64,
    pub noise_std: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub dropout_prob: f64,
    /// (max holes, max hole side as a fraction of the image side).
    pub coarse_dropout: (usize, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rotation_prob: 0.5,
            rotation_deg: 30.0,
            brightness_contrast_prob: 0.5,
            brightness_contrast: 0.20,
            hsv_prob: 0.5,
            hsv_shift: (10.0, 0.15, 0.15),
            noise_prob: 0.2,
            noise_std: 0.02,
            blur_prob: 0.1,
            blur_sigma_max: 1.0,
            dropout_prob: 0.3,
            coarse_dropout: (4, 0.10),
        }
    }
}

impl AugmentConfig {
    /// Every stochastic step switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            rotation_prob: 0.0,
            brightness_contrast_prob: 0.0,
            hsv_prob: 0.0,
            noise_prob: 0.0,
            blur_prob: 0.0,
            dropout_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("rotation_prob", self.rotation_prob),
            ("brightness_contrast_prob", self.brightness_contrast_prob),
            ("hsv_prob", self.hsv_prob),
            ("noise_prob", self.noise_prob),
            ("blur_prob", self.blur_prob),
            ("dropout_prob", self.dropout_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("augment", format!("{name} = {p} not in [0, 1]")));
            }
        }
        if !(self.rotation_deg >= 0.0) {
            return Err(Error::invalid("augment", "rotation_deg must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.brightness_contrast) {
            return Err(Error::invalid("augment", "brightness_contrast must be in [0, 1)"));
        }
        if self.noise_std < 0.0 || self.blur_sigma_max < 0.0 {
            return Err(Error::invalid("augment", "noise_std and blur_sigma_max must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.coarse_dropout.1) {
            return Err(Error::invalid("augment", "coarse dropout size must be in [0, 1]"));
        }
        Ok(())
    }
}

fn require_raw01(img: &NormalizedImage) -> Result<()> {
    if img.stage() != PixelStage::Raw01 {
        return Err(Error::invalid(
            "image",
            "augmentation expects raw01 pixels (before ImageNet standardization)",
        ));
    }
    Ok(())
}

/// Online augmentation: each step fires with its configured probability.
/// Every random draw is taken from `rng`, so a fixed seed fixes the output.
pub fn apply_augmentation<R: Rng>(
    img: &NormalizedImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<NormalizedImage> {
    require_raw01(img)?;
    let mut px = img.pixels().clone();
    let (h, w) = (img.height(), img.width());

    if rng.random_bool(cfg.flip_prob) {
        px = ops::hflip(&px);
    }
    if rng.random_bool(cfg.flip_prob) {
        px = ops::vflip(&px);
    }
    if rng.random_bool(cfg.rotation_prob) && cfg.rotation_deg > 0.0 {
        let angle = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
        px = ops::rotate(&px, angle);
    }
    if rng.random_bool(cfg.brightness_contrast_prob) {
        let b = 1.0 + symmetric(rng, cfg.brightness_contrast);
        let c = 1.0 + symmetric(rng, cfg.brightness_contrast);
        px = ops::brightness_contrast(&px, b, c);
    }
    if rng.random_bool(cfg.hsv_prob) {
        let (hb, sb, vb) = cfg.hsv_shift;
        let (dh, ds, dv) = (symmetric(rng, hb), symmetric(rng, sb), symmetric(rng, vb));
        px = ops::hsv_shift(&px, dh, ds, dv);
    }
    if rng.random_bool(cfg.noise_prob) && cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("std checked");
        px.mapv_inplace(|v| v + normal.sample(rng));
    }
    if rng.random_bool(cfg.blur_prob) && cfg.blur_sigma_max > 0.0 {
        let sigma = rng.random_range(0.0..=cfg.blur_sigma_max);
        px = ops::gaussian_blur(&px, sigma);
    }
    if rng.random_bool(cfg.dropout_prob) && cfg.coarse_dropout.0 > 0 {
        let (max_holes, frac) = cfg.coarse_dropout;
        let max_h = ((frac * h as f64) as usize).max(1);
        let max_w = ((frac * w as f64) as usize).max(1);
        let n = rng.random_range(1..=max_holes);
        let holes: Vec<ops::Hole> = (0..n)
            .map(|_| {
                let hh = rng.random_range(1..=max_h);
                let ww = rng.random_range(1..=max_w);
                (rng.random_range(0..h), rng.random_range(0..w), hh, ww)
            })
            .collect();
        px = ops::coarse_dropout(&px, &holes);
    }
    px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    NormalizedImage::raw01(px)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixUpConfig {
    pub alpha: f64,
    pub enabled: bool,
    /// Chance that a given training batch is mixed.
    pub probability: f64,
}

impl Default for MixUpConfig {
    fn default() -> Self {
        MixUpConfig {
            alpha: 0.2,
            enabled: true,
            probability: 0.5,
        }
    }
}

impl MixUpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("mixup.alpha", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::invalid("mixup.probability", "must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Array4<f64>,
    pub soft_labels: Array2<f64>,
    pub lambdas: Array1<f64>,
    pub partners: Vec<usize>,
}

/// `x'_i = l_i x_i + (1 - l_i) x_{partner_i}`, labels mixed the same way.
pub fn mix_with(
    images: &Array4<f64>,
    labels: &Array2<f64>,
    lambdas: &[f64],
    partners: &[usize],
) -> Result<MixedBatch> {
    let b = images.shape()[0];
    if labels.shape() != [b, NUM_CLASSES] {
        return Err(Error::Shape(format!(
            "labels {:?} do not match batch of {b}",
            labels.shape()
        )));
    }
    if lambdas.len() != b || partners.len() != b {
        return Err(Error::Shape("lambdas/partners length must equal batch size".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::invalid("lambdas", format!("{l} outside [0, 1]")));
    }
    if partners.iter().any(|&p| p >= b) {
        return Err(Error::invalid("partners", "partner index out of range"));
    }
    let mut out_images = images.clone();
    let mut out_labels = labels.clone();
    for i in 0..b {
        let (l, j) = (lambdas[i], partners[i]);
        let mixed = &images.index_axis(Axis(0), i) * l + &images.index_axis(Axis(0), j) * (1.0 - l);
        out_images.index_axis_mut(Axis(0), i).assign(&mixed);
        let mixed = &labels.row(i) * l + &labels.row(j) * (1.0 - l);
        out_labels.row_mut(i).assign(&mixed);
    }
    Ok(MixedBatch {
        images: out_images,
        soft_labels: out_labels,
        lambdas: Array1::from(lambdas.to_vec()),
        partners: partners.to_vec(),
    })
}

/// MixUp with per-sample `lambda ~ Beta(alpha, alpha)` and a random partner
/// permutation.
pub fn mixup_batch<R: Rng>(
    images: &Array4<f64>,
    labels: &Array2<f64>,
    cfg: &MixUpConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    cfg.validate()?;
    let b = images.shape()[0];
    if b < 2 {
        return Err(Error::invalid("images", format!("MixUp needs a batch of at least 2, got {b}")));
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::invalid("mixup.alpha", e.to_string()))?;
    let lambdas: Vec<f64> = (0..b).map(|_| beta.sample(rng).clamp(0.0, 1.0)).collect();
    let mut partners: Vec<usize> = (0..b).collect();
    partners.shuffle(rng);
    mix_with(images, labels, &lambdas, &partners)
}
