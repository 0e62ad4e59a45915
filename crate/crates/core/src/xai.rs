//! Grad-CAM and vanilla-gradient saliency, with colormapped overlays.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{LesionClass, NormalizedImage, PixelStage, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{BackwardRequest, Classifier, ParamGrads, ATTENTION_LAYER};
use crate::train::stack_images;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamWeights {
    pub alpha: Vec<f64>,
    pub target_class: usize,
    pub layer_name: String,
    /// Number of spatial positions averaged over.
    pub z: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapKind {
    GradCam,
    Saliency,
}

impl HeatmapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapKind::GradCam => "gradcam",
            HeatmapKind::Saliency => "saliency",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: Array2<f64>,
    pub kind: HeatmapKind,
    pub class_index: usize,
    pub normalized: bool,
}

impl Heatmap {
    /// Row-major position of the maximum (first one on ties).
    pub fn argmax(&self) -> (usize, usize) {
        argmax2(&self.grid)
    }
}

pub fn argmax2(grid: &Array2<f64>) -> (usize, usize) {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for ((y, x), &v) in grid.indexed_iter() {
        if v > best.1 {
            best = ((y, x), v);
        }
    }
    best.0
}

/// Channel weights (spatial mean of the gradients) and the ReLU'd weighted
/// activation sum, per batch element. Inputs are `B x H x W x K`.
pub fn grad_cam_from_maps(activations: &Array4<f64>, gradients: &Array4<f64>) -> Result<(Array2<f64>, Array3<f64>)> {
    if activations.dim() != gradients.dim() {
        return Err(Error::Shape(format!(
            "activations {:?} and gradients {:?} differ",
            activations.shape(),
            gradients.shape()
        )));
    }
    let (b, h, w, k) = activations.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("layer", "feature map has no spatial extent"));
    }
    let alpha = gradients
        .sum_axis(Axis(1))
        .sum_axis(Axis(1))
        .mapv(|v| v / (h * w) as f64);
    let flat = activations
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, h * w, k))
        .expect("contiguous");
    let mut maps = Array3::zeros((b, h, w));
    for bi in 0..b {
        let m = flat.index_axis(Axis(0), bi).dot(&alpha.row(bi));
        let m = m.into_shape_with_order((h, w)).expect("h * w values");
        maps.index_axis_mut(Axis(0), bi).assign(&m.mapv(|v| v.max(0.0)));
    }
    Ok((alpha, maps))
}

/// Half-pixel-centred bilinear resize with edge clamping.
pub fn upsample_bilinear(map: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (h, w) = map.dim();
    let (th, tw) = target;
    let coord = |o: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let (y0, y1, fy) = coord(y, h, th);
        let (x0, x1, fx) = coord(x, w, tw);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Divides by the maximum when it is positive.
pub fn normalize_max(map: &Array2<f64>) -> Array2<f64> {
    let m = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m > 0.0 {
        map / m
    } else {
        map.clone()
    }
}

fn model_input(image: &NormalizedImage) -> Result<Array4<f64>> {
    stack_images(std::iter::once(image))
}

fn check_class(class: usize) -> Result<()> {
    if class >= NUM_CLASSES {
        return Err(Error::invalid("class", format!("class index {class} out of range")));
    }
    Ok(())
}

fn logit_seed(class: usize) -> Array2<f64> {
    let mut d = Array2::zeros((1, NUM_CLASSES));
    d[[0, class]] = 1.0;
    d
}

/// Predicted class of a single image.
pub fn predicted_class(model: &Classifier, image: &NormalizedImage) -> Result<usize> {
    let (probs, _) = model.forward(&model_input(image)?)?;
    Ok(crate::train::argmax_rows(&probs)[0])
}

pub fn grad_cam(
    model: &Classifier,
    image: &NormalizedImage,
    class: usize,
    layer: &str,
) -> Result<(Heatmap, GradCamWeights)> {
    check_class(class)?;
    let x = model_input(image)?;
    let trace = model.forward_trace(&x)?;
    let acts = trace
        .layer(layer)
        .ok_or_else(|| Error::invalid("layer", format!("unknown layer {layer:?}; known: {}", model.layer_names().join(", "))))?
        .clone();
    let req = BackwardRequest {
        params: ParamGrads::None,
        input: false,
        layers: vec![layer.to_string()],
    };
    let grads = model.backward(&trace, &logit_seed(class), &req)?;
    let (alpha, maps) = grad_cam_from_maps(&acts, &grads.layers[layer])?;
    let (_, h, w, _) = acts.dim();
    let raw = maps.index_axis(Axis(0), 0).to_owned();
    let grid = normalize_max(&upsample_bilinear(&raw, (image.height(), image.width())));
    Ok((
        Heatmap {
            grid,
            kind: HeatmapKind::GradCam,
            class_index: class,
            normalized: true,
        },
        GradCamWeights {
            alpha: alpha.row(0).to_vec(),
            target_class: class,
            layer_name: layer.to_string(),
            z: h * w,
        },
    ))
}

pub fn grad_cam_default(model: &Classifier, image: &NormalizedImage, class: usize) -> Result<Heatmap> {
    grad_cam(model, image, class, ATTENTION_LAYER).map(|(h, _)| h)
}

/// `max_ch |g|` per pixel of an `H x W x 3` gradient.
pub fn saliency_from_gradient(grad: &Array3<f64>) -> Array2<f64> {
    grad.map_axis(Axis(2), |px| px.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Raw input gradient of the class logit, `H x W x 3`.
pub fn input_gradient(model: &Classifier, image: &NormalizedImage, class: usize) -> Result<Array3<f64>> {
    check_class(class)?;
    let trace = model.forward_trace(&model_input(image)?)?;
    let req = BackwardRequest {
        params: ParamGrads::None,
        input: true,
        layers: Vec::new(),
    };
    let g = model.backward(&trace, &logit_seed(class), &req)?;
    let g = g.input.ok_or_else(|| Error::Shape("model produced no input gradient".into()))?;
    Ok(g.index_axis(Axis(0), 0).to_owned())
}

pub fn saliency_map(model: &Classifier, image: &NormalizedImage, class: usize) -> Result<Heatmap> {
    let g = input_gradient(model, image, class)?;
    Ok(Heatmap {
        grid: normalize_max(&saliency_from_gradient(&g)),
        kind: HeatmapKind::Saliency,
        class_index: class,
        normalized: true,
    })
}

const VIRIDIS: [[f64; 3]; 9] = [
    [0.267, 0.005, 0.329],
    [0.279, 0.175, 0.483],
    [0.230, 0.322, 0.546],
    [0.173, 0.449, 0.558],
    [0.128, 0.567, 0.551],
    [0.158, 0.684, 0.502],
    [0.369, 0.789, 0.383],
    [0.678, 0.864, 0.190],
    [0.993, 0.906, 0.144],
];

/// Piecewise-linear viridis lookup for `v` in `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (v.floor() as usize).min(VIRIDIS.len() - 2);
    let f = v - i as f64;
    std::array::from_fn(|c| VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f)
}

/// `(1 - opacity) * image + opacity * colormap(heatmap)`.
pub fn overlay(image: &NormalizedImage, heatmap: &Heatmap, opacity: f64) -> Result<NormalizedImage> {
    if image.stage() != PixelStage::Raw01 {
        return Err(Error::invalid("image", "overlay needs a raw [0, 1] image"));
    }
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::invalid("opacity", "must be in [0, 1]"));
    }
    if heatmap.grid.dim() != (image.height(), image.width()) {
        return Err(Error::Shape(format!(
            "heatmap {:?} does not match image {}x{}; upsample first",
            heatmap.grid.shape(),
            image.height(),
            image.width()
        )));
    }
    let px = image.pixels();
    let out = Array3::from_shape_fn(px.raw_dim(), |(y, x, c)| {
        let v = (1.0 - opacity) * px[[y, x, c]] + opacity * colormap(heatmap.grid[[y, x]])[c];
        v.clamp(0.0, 1.0)
    });
    NormalizedImage::raw01(out)
}

fn write_grid_csv(grid: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in grid.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `<id>_<class>_<kind>.png` (overlay) and `.csv` (raw grid).
pub fn export_heatmap(
    dir: &Path,
    image_id: &str,
    image: &NormalizedImage,
    heatmap: &Heatmap,
    opacity: f64,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let class = LesionClass::from_index(heatmap.class_index)
        .ok_or_else(|| Error::invalid("class", "class index out of range"))?;
    let stem = format!("{image_id}_{}_{}", class.code(), heatmap.kind.as_str());
    let png = dir.join(format!("{stem}.png"));
    let csv = dir.join(format!("{stem}.csv"));
    let rgb = overlay(image, heatmap, opacity)?.to_rgb8()?;
    rgb.save(&png).map_err(|e| Error::Image(format!("{}: {e}", png.display())))?;
    write_grid_csv(&heatmap.grid, &csv)?;
    Ok((png, csv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionConfig, BackboneSpec, HeadConfig, ModelSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(a: &Array4<f64>, g: &Array4<f64>) -> Array3<f64> {
        let (b, h, w, k) = a.dim();
        let mut out = Array3::zeros((b, h, w));
        for bi in 0..b {
            let mut alpha = vec![0.0; k];
            for (kk, al) in alpha.iter_mut().enumerate() {
                for i in 0..h {
                    for j in 0..w {
                        *al += g[[bi, i, j, kk]];
                    }
                }
                *al /= (h * w) as f64;
            }
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for (kk, al) in alpha.iter().enumerate() {
                        s += al * a[[bi, i, j, kk]];
                    }
                    out[[bi, i, j]] = s.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Array4::from_shape_simple_fn((2, 3, 3, 4), || rng.random_range(-1.0..1.0));
        let g = Array4::from_shape_simple_fn((2, 3, 3, 4), || rng.random_range(-1.0..1.0));
        let (_, maps) = grad_cam_from_maps(&a, &g).unwrap();
        for (x, y) in maps.iter().zip(oracle(&a, &g).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_and_relu_cases() {
        let ones = Array4::ones((1, 4, 4, 1));
        let (alpha, maps) = grad_cam_from_maps(&ones, &ones).unwrap();
        assert_eq!(alpha[[0, 0]], 1.0);
        assert!(maps.iter().all(|v| *v == 1.0));
        let (_, maps) = grad_cam_from_maps(&ones, &(-&ones)).unwrap();
        assert!(maps.iter().all(|v| *v == 0.0));
        assert!(grad_cam_from_maps(&ones, &Array4::ones((1, 4, 4, 2))).is_err());
    }

    #[test]
    fn linear_saliency_is_abs_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Array3::from_shape_simple_fn((5, 4, 3), || rng.random_range(-1.0..1.0));
        // For y = sum(w * x) the input gradient is w.
        let s = saliency_from_gradient(&w);
        for ((y, x), v) in s.indexed_iter() {
            let expected = (0..3).map(|c| w[[y, x, c]].abs()).fold(0.0, f64::max);
            assert_eq!(*v, expected);
        }
    }

    fn tiny_model() -> Classifier {
        let spec = ModelSpec {
            backbone: BackboneSpec {
                channels: vec![4, 8],
                strides: vec![2, 2],
                ..BackboneSpec::toy()
            },
            attention: AttentionConfig {
                reduction_ratio: 2,
                channels: None,
            },
            head: HeadConfig {
                dropout: 0.5,
                hidden_sizes: vec![8],
                num_classes: 7,
            },
        };
        Classifier::build(&spec, 5).unwrap()
    }

    fn image(seed: u64) -> NormalizedImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NormalizedImage::raw01(Array3::from_shape_simple_fn((12, 12, 3), || rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn saliency_gradient_matches_finite_differences() {
        let model = tiny_model();
        let img = image(1).standardize().unwrap();
        let g = input_gradient(&model, &img, 3).unwrap();
        let logit = |px: &Array3<f64>| {
            let x = px.clone().insert_axis(Axis(0));
            model.forward_trace(&x).unwrap().logits[[0, 3]]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..20 {
            let idx = [rng.random_range(0..12), rng.random_range(0..12), rng.random_range(0..3)];
            let (mut p, mut m) = (img.pixels().clone(), img.pixels().clone());
            p[idx] += h;
            m[idx] -= h;
            let fd = (logit(&p) - logit(&m)) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-3 * fd.abs().max(1e-6), "{fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn model_heatmaps() {
        let model = tiny_model();
        let img = image(3);
        let (hm, w) = grad_cam(&model, &img, 2, ATTENTION_LAYER).unwrap();
        assert_eq!(hm.grid.dim(), (12, 12));
        assert!(hm.grid.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(w.alpha.len(), 8);
        assert_eq!(w.z, 9);
        assert!(grad_cam(&model, &img, 2, "block1").is_ok());
        assert!(grad_cam(&model, &img, 2, "block9").is_err());
        assert!(grad_cam(&model, &img, 7, ATTENTION_LAYER).is_err());
        let s1 = saliency_map(&model, &img, 1).unwrap();
        let s2 = saliency_map(&model, &img, 1).unwrap();
        assert_eq!(s1, s2);
        let max = s1.grid.iter().copied().fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlay_blending() {
        let img = image(4);
        let zero = Heatmap {
            grid: Array2::zeros((12, 12)),
            kind: HeatmapKind::GradCam,
            class_index: 0,
            normalized: true,
        };
        assert_eq!(overlay(&img, &zero, 0.0).unwrap(), img);
        let full = overlay(&img, &zero, 1.0).unwrap();
        let c0 = colormap(0.0);
        assert!(full.pixels().lanes(Axis(2)).into_iter().all(|p| (0..3).all(|c| (p[c] - c0[c]).abs() < 1e-12)));
        let half = overlay(&img, &zero, 0.5).unwrap();
        let expected = (img.pixels()[[0, 0, 1]] + c0[1]) / 2.0;
        assert!((half.pixels()[[0, 0, 1]] - expected).abs() < 1e-12);
        let small = Heatmap {
            grid: Array2::zeros((3, 3)),
            ..zero.clone()
        };
        assert!(overlay(&img, &small, 0.5).is_err());
        assert!(overlay(&img.standardize().unwrap(), &zero, 0.5).is_err());
    }

    #[test]
    fn export_names() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(5);
        let hm = saliency_map(&tiny_model(), &img, 4).unwrap();
        let (png, csv) = export_heatmap(dir.path(), "img_7", &img, &hm, 0.5).unwrap();
        assert!(png.ends_with("img_7_mel_saliency.png"));
        assert!(png.exists());
        assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 12);
    }

    fn argmax_cell_distance(map: &Array2<f64>, scale: usize) -> usize {
        let up = upsample_bilinear(map, (map.nrows() * scale, map.ncols() * scale));
        let (ly, lx) = argmax2(map);
        let (uy, ux) = argmax2(&up);
        (uy / scale).abs_diff(ly).max((ux / scale).abs_diff(lx))
    }

    proptest! {
        // Odd factors sample every source centre exactly.
        #[test]
        fn odd_upsampling_keeps_argmax_cell(vals in prop::collection::vec(0.0f64..1.0, 16), half in 1usize..4) {
            let map = Array2::from_shape_vec((4, 4), vals).unwrap();
            prop_assert!(argmax_cell_distance(&map, 2 * half + 1) <= 1);
        }

        // Even factors sample a quarter-pixel off centre, so the peak must
        // beat every other cell by the resulting attenuation.
        #[test]
        fn even_upsampling_keeps_dominant_argmax_cell(
            vals in prop::collection::vec(0.0f64..0.55, 16),
            peak in 0usize..16,
            half in 1usize..9,
        ) {
            let scale = 2 * half;
            let mut map = Array2::from_shape_vec((4, 4), vals).unwrap();
            map[[peak / 4, peak % 4]] = 1.0;
            let (ly, lx) = argmax2(&map);
            let atten = (1.0 - 1.0 / (2.0 * scale as f64)).powi(2);
            let runner_up = map.indexed_iter().filter(|(i, _)| *i != (ly, lx)).map(|(_, v)| *v).fold(0.0, f64::max);
            prop_assert!(atten * map[[ly, lx]] > runner_up);
            prop_assert!(argmax_cell_distance(&map, scale) <= 1);
        }
    }
}
