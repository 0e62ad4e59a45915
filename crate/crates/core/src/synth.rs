//! Synthetic dermoscopy stand-in: each class is a colored blob on a noisy
//! skin-tone background, placed in a class-specific image quadrant.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::ops::hsv_to_rgb;
use crate::dataset::{ClassCounts, LesionClass, NUM_CLASSES};
use crate::error::{Error, Result};

/// 10:1 imbalance over 700 images.
pub const DESK_COUNTS: [usize; NUM_CLASSES] = [40, 60, 100, 25, 100, 250, 125];

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub size: usize,
    pub counts: ClassCounts,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            size: 64,
            counts: ClassCounts(DESK_COUNTS),
            seed: 42,
        }
    }
}

/// Quadrant index: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
pub fn blob_quadrant(class: LesionClass) -> usize {
    class.index() % 4
}

pub fn quadrant_of(y: usize, x: usize, height: usize, width: usize) -> usize {
    let row = usize::from(2 * y >= height);
    let col = usize::from(2 * x >= width);
    2 * row + col
}

pub fn class_color(class: LesionClass) -> [f64; 3] {
    let hue = 360.0 * class.index() as f64 / NUM_CLASSES as f64;
    let (r, g, b) = hsv_to_rgb(hue, 0.85, 0.75);
    [r, g, b]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub image: RgbImage,
    pub center: (f64, f64),
    pub radius: f64,
}

pub fn render_blob<R: Rng>(class: LesionClass, size: usize, rng: &mut R) -> Result<Blob> {
    if size < 16 {
        return Err(Error::invalid("size", "blob images need at least 16 pixels per side"));
    }
    let s = size as f64;
    let half = s / 2.0;
    let radius = rng.random_range(0.11 * s..0.16 * s);
    let margin = radius + 1.0;
    let q = blob_quadrant(class);
    let (y0, x0) = (if q >= 2 { half } else { 0.0 }, if q % 2 == 1 { half } else { 0.0 });
    let cy = y0 + rng.random_range(margin..half - margin);
    let cx = x0 + rng.random_range(margin..half - margin);
    let skin = [
        0.80 + rng.random_range(-0.05..0.05),
        0.62 + rng.random_range(-0.05..0.05),
        0.52 + rng.random_range(-0.05..0.05),
    ];
    let color = class_color(class);
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            // Soft one-pixel edge.
            let a = (radius + 0.5 - d).clamp(0.0, 1.0);
            let px: [u8; 3] = std::array::from_fn(|c| {
                let v = (1.0 - a) * skin[c] + a * color[c] + noise.sample(rng);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(Blob {
        image,
        center: (cy, cx),
        radius,
    })
}

/// Writes `images/<id>.png` and `metadata.csv` (image_id, dx, quadrant) under
/// `dir`. Returns the CSV path.
pub fn write_blob_dataset(dir: &Path, spec: &BlobSpec) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let csv_path = dir.join("metadata.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Io {
        path: csv_path.clone(),
        source: e.into(),
    })?;
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(["image_id", "dx", "quadrant"]).map_err(ser)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut n = 0;
    for class in LesionClass::ALL {
        for _ in 0..spec.counts[class] {
            let id = format!("blob_{n:05}");
            let blob = render_blob(class, spec.size, &mut rng)?;
            let path = img_dir.join(format!("{id}.png"));
            blob.image.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
            w.write_record([id.as_str(), class.code(), &blob_quadrant(class).to_string()])
                .map_err(ser)?;
            n += 1;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_sits_in_its_quadrant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for class in LesionClass::ALL {
            for _ in 0..20 {
                let b = render_blob(class, 64, &mut rng).unwrap();
                let (cy, cx) = b.center;
                for (y, x) in [(cy - b.radius, cx), (cy + b.radius, cx), (cy, cx - b.radius), (cy, cx + b.radius)] {
                    assert_eq!(quadrant_of(y as usize, x as usize, 64, 64), blob_quadrant(class));
                }
            }
        }
    }

    #[test]
    fn dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BlobSpec {
            size: 32,
            counts: ClassCounts([2, 1, 1, 1, 1, 3, 1]),
            seed: 1,
        };
        let csv = write_blob_dataset(dir.path(), &spec).unwrap();
        let m = crate::dataset::load_manifest(&csv, &dir.path().join("images")).unwrap();
        assert_eq!(m.class_counts(), spec.counts);
        assert_eq!(m.records()[0].metadata["quadrant"], "0");
        let again = tempfile::tempdir().unwrap();
        write_blob_dataset(again.path(), &spec).unwrap();
        let a = fs::read(dir.path().join("images/blob_00005.png")).unwrap();
        let b = fs::read(again.path().join("images/blob_00005.png")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quadrants() {
        assert_eq!(quadrant_of(0, 0, 64, 64), 0);
        assert_eq!(quadrant_of(0, 40, 64, 64), 1);
        assert_eq!(quadrant_of(40, 0, 64, 64), 2);
        assert_eq!(quadrant_of(63, 63, 64, 64), 3);
    }
}
