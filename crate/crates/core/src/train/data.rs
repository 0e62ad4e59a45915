use ndarray::{Array2, Array4, Axis};

use crate::dataset::{load_rgb, resize_raw01, LesionClass, NormalizedImage, PixelStage, SampleRecord};
use crate::error::{Error, Result};
use crate::model::Classifier;

/// In-memory images (raw `[0, 1]` pixels) with their labels.
#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub ids: Vec<String>,
    pub images: Vec<NormalizedImage>,
    pub labels: Vec<LesionClass>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    pub fn push(&mut self, id: String, image: NormalizedImage, label: LesionClass) {
        self.ids.push(id);
        self.images.push(image);
        self.labels.push(label);
    }
}

/// Decodes and resizes every record. Records carrying balancing provenance
/// are rebuilt from their source image and stored transform.
pub fn load_records<'a, I>(records: I, target: (usize, usize)) -> Result<LabeledImages>
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    let mut out = LabeledImages::default();
    for rec in records {
        let rgb = load_rgb(&rec.path)?;
        let mut img = resize_raw01(&rgb, target)?;
        if let Some(p) = &rec.provenance {
            img = p.transform.apply(&img)?;
        }
        out.push(rec.image_id.clone(), img, rec.label);
    }
    Ok(out)
}

/// Stacks same-sized images into a `B x H x W x 3` batch, standardizing raw
/// images on the way.
pub fn stack_images<'a, I>(images: I) -> Result<Array4<f64>>
where
    I: IntoIterator<Item = &'a NormalizedImage>,
{
    let mut views = Vec::new();
    for img in images {
        let std = match img.stage() {
            PixelStage::Raw01 => img.standardize()?.into_pixels(),
            PixelStage::Imagenet => img.pixels().clone(),
        };
        views.push(std.insert_axis(Axis(0)));
    }
    if views.is_empty() {
        return Err(Error::Shape("cannot stack an empty image list".into()));
    }
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    ndarray::concatenate(Axis(0), &refs).map_err(|e| Error::Shape(format!("images differ in size: {e}")))
}

/// Inference-mode class probabilities in batches of `batch_size`.
pub fn predict(model: &Classifier, images: &[NormalizedImage], batch_size: usize) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let (probs, _) = model.forward(&stack_images(chunk)?)?;
        rows.push(probs);
    }
    if rows.is_empty() {
        return Ok(Array2::zeros((0, crate::dataset::NUM_CLASSES)));
    }
    let refs: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &refs).expect("same width"))
}

pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
