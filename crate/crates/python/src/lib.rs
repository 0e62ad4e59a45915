//! Python bindings. Arrays cross the boundary as nested lists (numpy arrays
//! are accepted anywhere a sequence is) and come back as nested lists.

use std::path::PathBuf;

use dermanet::augment::balancing_plan as plan_counts;
use dermanet::config::{Preset, RunConfig};
use dermanet::dataset::{stratified_split, ClassCounts, ClassWeights, DatasetManifest, LesionClass, NormalizedImage, Split, SplitSpec, NUM_CLASSES};
use dermanet::model::{CheckpointMeta, Classifier, FreezeStage, ATTENTION_LAYER};
use dermanet::synth::{write_blob_dataset as write_blobs, BlobSpec, DESK_COUNTS};
use dermanet::train::{one_hot, predict as predict_probs, smooth_labels, FocalLossConfig};
use dermanet::{evalx, xai};
use ndarray::{Array2, Array3, Array4};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: dermanet::Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn counts_arg(counts: Vec<usize>) -> PyResult<ClassCounts> {
    let arr: [usize; NUM_CLASSES] = counts
        .try_into()
        .map_err(|v: Vec<usize>| PyValueError::new_err(format!("expected {NUM_CLASSES} counts, got {}", v.len())))?;
    Ok(ClassCounts(arr))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Array2::from_shape_vec((n, k), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn image(px: Vec<Vec<Vec<f64>>>) -> PyResult<NormalizedImage> {
    let h = px.len();
    let w = px.first().map_or(0, Vec::len);
    if px.iter().any(|r| r.len() != w || r.iter().any(|p| p.len() != 3)) {
        return Err(PyValueError::new_err("image must be H x W x 3"));
    }
    let flat: Vec<f64> = px.into_iter().flatten().flatten().collect();
    let arr = Array3::from_shape_vec((h, w, 3), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    NormalizedImage::raw01(arr).map_err(py_err)
}

fn tensor4(v: Vec<Vec<Vec<Vec<f64>>>>) -> PyResult<Array4<f64>> {
    let b = v.len();
    let h = v.first().map_or(0, Vec::len);
    let w = v.first().and_then(|x| x.first()).map_or(0, Vec::len);
    let k = v.first().and_then(|x| x.first()).and_then(|x| x.first()).map_or(0, Vec::len);
    let flat: Vec<f64> = v.into_iter().flatten().flatten().flatten().collect();
    Array4::from_shape_vec((b, h, w, k), flat).map_err(|_| PyValueError::new_err("tensor must be a regular B x H x W x K array"))
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn loss_config(gamma: f64, alpha: f64, smoothing: f64) -> FocalLossConfig {
    FocalLossConfig {
        gamma,
        alpha,
        smoothing,
        use_class_weights: false,
    }
}

/// Class codes in index order.
#[pyfunction]
fn class_codes() -> Vec<&'static str> {
    LesionClass::ALL.iter().map(|c| c.code()).collect()
}

/// Per-class targets after raising minorities to `round(fraction * max)`.
#[pyfunction]
#[pyo3(signature = (counts, fraction = 0.6))]
fn balancing_plan<'py>(py: Python<'py>, counts: Vec<usize>, fraction: f64) -> PyResult<Bound<'py, PyDict>> {
    let plan = plan_counts(&counts_arg(counts)?, fraction).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("targets", plan.targets.0.to_vec())?;
    d.set_item("to_generate", plan.to_generate.0.to_vec())?;
    d.set_item("total", plan.total())?;
    Ok(d)
}

/// Per-class train/val/test sizes of a stratified split.
#[pyfunction]
#[pyo3(signature = (counts, seed = 42, train = 0.70, val = 0.15, test = 0.15))]
fn split_counts<'py>(
    py: Python<'py>,
    counts: Vec<usize>,
    seed: u64,
    train: f64,
    val: f64,
    test: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let manifest = DatasetManifest::from_counts(&counts_arg(counts)?, std::path::Path::new("images"));
    let spec = SplitSpec { train, val, test, seed };
    let split = stratified_split(manifest, &spec).map_err(py_err)?;
    let d = PyDict::new(py);
    for s in [Split::Train, Split::Val, Split::Test] {
        d.set_item(s.as_str(), split.split_counts(s).0.to_vec())?;
    }
    Ok(d)
}

#[pyfunction]
fn class_weights(counts: Vec<usize>) -> PyResult<Vec<f64>> {
    Ok(ClassWeights::from_counts(&counts_arg(counts)?).map_err(py_err)?.0.to_vec())
}

/// Batch-mean focal loss of softmax probabilities against hard labels.
#[pyfunction]
#[pyo3(signature = (probs, labels, gamma = 2.0, alpha = 0.25, smoothing = 0.1))]
fn focal_loss(probs: Vec<Vec<f64>>, labels: Vec<usize>, gamma: f64, alpha: f64, smoothing: f64) -> PyResult<f64> {
    let targets = smooth_labels(&one_hot(&labels).map_err(py_err)?, smoothing).map_err(py_err)?;
    dermanet::train::focal_loss(&matrix(probs)?, &targets, &loss_config(gamma, alpha, smoothing), None).map_err(py_err)
}

/// Gradient of `focal_loss` with respect to the logits.
#[pyfunction]
#[pyo3(signature = (probs, labels, gamma = 2.0, alpha = 0.25, smoothing = 0.1))]
fn focal_loss_grad(
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    gamma: f64,
    alpha: f64,
    smoothing: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let targets = smooth_labels(&one_hot(&labels).map_err(py_err)?, smoothing).map_err(py_err)?;
    let g = dermanet::train::focal_loss_grad(&matrix(probs)?, &targets, &loss_config(gamma, alpha, smoothing), None)
        .map_err(py_err)?;
    Ok(rows(&g))
}

/// Mann-Whitney AUC; `None` when either side is empty.
#[pyfunction]
fn auc(positives: Vec<f64>, negatives: Vec<f64>) -> Option<f64> {
    evalx::auc_mann_whitney(&positives, &negatives)
}

/// Metrics report (per-class, macro, weighted, micro AUC) for `N x 7` scores.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, scores: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    let eval = evalx::evaluate_scores(&matrix(scores)?, &labels).map_err(py_err)?;
    let text = serde_json::to_string(&eval.report()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

/// Channel weights and ReLU'd maps from `B x H x W x K` activations and gradients.
#[pyfunction]
fn grad_cam_maps(
    activations: Vec<Vec<Vec<Vec<f64>>>>,
    gradients: Vec<Vec<Vec<Vec<f64>>>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let (alpha, maps) = xai::grad_cam_from_maps(&tensor4(activations)?, &tensor4(gradients)?).map_err(py_err)?;
    let maps = maps.outer_iter().map(|m| rows(&m.to_owned())).collect();
    Ok((rows(&alpha), maps))
}

/// Writes the synthetic blob dataset and returns the metadata CSV path.
#[pyfunction]
#[pyo3(signature = (dir, counts = None, size = 64, seed = 42))]
fn write_blob_dataset(dir: PathBuf, counts: Option<Vec<usize>>, size: usize, seed: u64) -> PyResult<PathBuf> {
    let counts = counts.map(counts_arg).transpose()?.unwrap_or(ClassCounts(DESK_COUNTS));
    write_blobs(&dir, &BlobSpec { size, counts, seed }).map_err(py_err)
}

/// Resolved TOML for a named preset (`desk` or `paper`).
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    let preset: Preset = name.parse().map_err(py_err)?;
    RunConfig::preset(preset).to_toml_string().map_err(py_err)
}

#[pyclass(name = "Classifier", module = "dermanet")]
struct PyClassifier {
    inner: Classifier,
}

impl PyClassifier {
    fn class_or_predicted(&self, img: &NormalizedImage, class_index: Option<usize>) -> PyResult<usize> {
        match class_index {
            Some(c) => Ok(c),
            None => xai::predicted_class(&self.inner, img).map_err(py_err),
        }
    }
}

#[pymethods]
impl PyClassifier {
    /// Fresh model with the architecture of `preset`.
    #[new]
    #[pyo3(signature = (seed = 42, preset = "desk"))]
    fn new(seed: u64, preset: &str) -> PyResult<Self> {
        let preset: Preset = preset.parse().map_err(py_err)?;
        let cfg = RunConfig::preset(preset);
        Ok(PyClassifier {
            inner: Classifier::build(&cfg.model, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (inner, _) = Classifier::load(&dir).map_err(py_err)?;
        Ok(PyClassifier { inner })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir, &CheckpointMeta::default()).map_err(py_err)
    }

    /// `(total, trainable)` parameter counts under the current freeze stage.
    fn parameter_counts(&self) -> (u64, u64) {
        let c = self.inner.parameter_counts();
        (c.total, c.trainable)
    }

    fn set_freeze_stage(&mut self, stage: u8) -> PyResult<()> {
        self.inner.set_freeze_stage(FreezeStage::try_from(stage).map_err(py_err)?);
        Ok(())
    }

    fn layer_names(&self) -> Vec<String> {
        self.inner.layer_names()
    }

    /// Class probabilities for a list of `H x W x 3` images in `[0, 1]`.
    #[pyo3(signature = (images, batch_size = 32))]
    fn predict(&self, images: Vec<Vec<Vec<Vec<f64>>>>, batch_size: usize) -> PyResult<Vec<Vec<f64>>> {
        let imgs = images.into_iter().map(image).collect::<PyResult<Vec<_>>>()?;
        Ok(rows(&predict_probs(&self.inner, &imgs, batch_size).map_err(py_err)?))
    }

    /// Max-normalized Grad-CAM heatmap at image resolution. Defaults to the
    /// predicted class and the attention output.
    #[pyo3(signature = (img, class_index = None, layer = ATTENTION_LAYER))]
    fn grad_cam(&self, img: Vec<Vec<Vec<f64>>>, class_index: Option<usize>, layer: &str) -> PyResult<Vec<Vec<f64>>> {
        let img = image(img)?;
        let class = self.class_or_predicted(&img, class_index)?;
        let (hm, _) = xai::grad_cam(&self.inner, &img, class, layer).map_err(py_err)?;
        Ok(rows(&hm.grid))
    }

    /// Max-normalized `max_ch |d logit / d x|`.
    #[pyo3(signature = (img, class_index = None))]
    fn saliency(&self, img: Vec<Vec<Vec<f64>>>, class_index: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let img = image(img)?;
        let class = self.class_or_predicted(&img, class_index)?;
        Ok(rows(&xai::saliency_map(&self.inner, &img, class).map_err(py_err)?.grid))
    }
}

#[pymodule]
#[pyo3(name = "dermanet")]
fn dermanet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NUM_CLASSES", NUM_CLASSES)?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(class_codes, m)?)?;
    m.add_function(wrap_pyfunction!(balancing_plan, m)?)?;
    m.add_function(wrap_pyfunction!(split_counts, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_cam_maps, m)?)?;
    m.add_function(wrap_pyfunction!(write_blob_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    Ok(())
}
