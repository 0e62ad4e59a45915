use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassWeights, NUM_CLASSES};
use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalLossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub smoothing: f64,
    /// Multiply each class term by its inverse-frequency weight.
    pub use_class_weights: bool,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig {
            gamma: 2.0,
            alpha: 0.25,
            smoothing: 0.1,
            use_class_weights: false,
        }
    }
}

impl FocalLossConfig {
    pub fn cross_entropy() -> Self {
        FocalLossConfig {
            gamma: 0.0,
            alpha: 1.0,
            smoothing: 0.0,
            use_class_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("loss.gamma", "must be >= 0"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("loss.alpha", "must be in (0, 1]"));
        }
        check_smoothing(self.smoothing)
    }
}

fn check_smoothing(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid("smoothing", format!("{eps} outside [0, 1)")));
    }
    Ok(())
}

/// `(1 - eps) * y + eps / K`, row-wise.
pub fn smooth_labels(onehot: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    check_smoothing(eps)?;
    if onehot.ncols() != NUM_CLASSES {
        return Err(Error::Shape(format!("expected {NUM_CLASSES} columns, got {}", onehot.ncols())));
    }
    Ok(onehot.mapv(|v| (1.0 - eps) * v + eps / NUM_CLASSES as f64))
}

pub fn one_hot(labels: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), NUM_CLASSES));
    for (i, &l) in labels.iter().enumerate() {
        if l >= NUM_CLASSES {
            return Err(Error::invalid("labels", format!("class index {l} out of range")));
        }
        out[[i, l]] = 1.0;
    }
    Ok(out)
}

fn check_inputs(probs: &Array2<f64>, targets: &Array2<f64>) -> Result<()> {
    if probs.dim() != targets.dim() || probs.ncols() != NUM_CLASSES {
        return Err(Error::Shape(format!(
            "probs {:?} and targets {:?} must both be B x {NUM_CLASSES}",
            probs.shape(),
            targets.shape()
        )));
    }
    if probs.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if probs.iter().chain(targets.iter()).any(|v| v.is_nan()) {
        return Err(Error::invalid("probs", "NaN in loss inputs"));
    }
    Ok(())
}

fn class_weight(weights: Option<&ClassWeights>, cfg: &FocalLossConfig, c: usize) -> f64 {
    match weights {
        Some(w) if cfg.use_class_weights => w.0[c],
        _ => 1.0,
    }
}

/// Batch-mean focal loss `-alpha * sum_c w_c t_c (1 - p_c)^gamma log p_c`.
pub fn focal_loss(
    probs: &Array2<f64>,
    targets: &Array2<f64>,
    cfg: &FocalLossConfig,
    weights: Option<&ClassWeights>,
) -> Result<f64> {
    cfg.validate()?;
    check_inputs(probs, targets)?;
    let mut total = 0.0;
    for (p, t) in probs.rows().into_iter().zip(targets.rows()) {
        for c in 0..NUM_CLASSES {
            if t[c] == 0.0 {
                continue;
            }
            let pc = p[c].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= class_weight(weights, cfg, c) * t[c] * (1.0 - pc).powf(cfg.gamma) * pc.ln();
        }
    }
    Ok(cfg.alpha * total / probs.nrows() as f64)
}

/// Gradient of [`focal_loss`] with respect to the pre-softmax logits, given
/// `probs = softmax(logits)`.
pub fn focal_loss_grad(
    probs: &Array2<f64>,
    targets: &Array2<f64>,
    cfg: &FocalLossConfig,
    weights: Option<&ClassWeights>,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_inputs(probs, targets)?;
    let b = probs.nrows() as f64;
    let mut grad = Array2::zeros(probs.raw_dim());
    for ((p, t), mut out) in probs
        .rows()
        .into_iter()
        .zip(targets.rows())
        .zip(grad.axis_iter_mut(Axis(0)))
    {
        // dL/dp_c, zero where the clamp is active.
        let mut g = [0.0; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            let pc = p[c];
            if t[c] == 0.0 || !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pc) {
                continue;
            }
            let q = 1.0 - pc;
            let mut d = q.powf(cfg.gamma) / pc;
            if cfg.gamma != 0.0 {
                d -= cfg.gamma * q.powf(cfg.gamma - 1.0) * pc.ln();
            }
            g[c] = -cfg.alpha * class_weight(weights, cfg, c) * t[c] * d / b;
        }
        let dot: f64 = (0..NUM_CLASSES).map(|c| g[c] * p[c]).sum();
        for j in 0..NUM_CLASSES {
            out[j] = p[j] * (g[j] - dot);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_rows;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn smoothing_values() {
        let y = one_hot(&[3]).unwrap();
        let s = smooth_labels(&y, 0.1).unwrap();
        assert!((s[[0, 3]] - (0.9 + 0.1 / 7.0)).abs() < 1e-12);
        assert!((s[[0, 0]] - 0.1 / 7.0).abs() < 1e-12);
        assert!((s.sum() - 1.0).abs() < 1e-9);
        assert_eq!(smooth_labels(&y, 0.0).unwrap(), y);
        assert!(smooth_labels(&y, 1.0).is_err());
        assert!(smooth_labels(&y, -0.1).is_err());
    }

    #[test]
    fn single_sample_hand_value() {
        let mut p = vec![0.1 / 6.0; 7];
        p[2] = 0.9;
        let probs = Array2::from_shape_vec((1, 7), p).unwrap();
        let t = one_hot(&[2]).unwrap();
        let cfg = FocalLossConfig {
            smoothing: 0.0,
            ..FocalLossConfig::default()
        };
        let l = focal_loss(&probs, &t, &cfg, None).unwrap();
        assert!((l - 0.25 * 0.01 * -(0.9f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let p = Array2::from_elem((2, 7), 1.0 / 7.0);
        let t = one_hot(&[0]).unwrap();
        assert!(focal_loss(&p, &t, &FocalLossConfig::default(), None).is_err());
        let mut bad = p.clone();
        bad[[0, 0]] = f64::NAN;
        let t = one_hot(&[0, 1]).unwrap();
        assert!(focal_loss(&bad, &t, &FocalLossConfig::default(), None).is_err());
    }

    #[test]
    fn class_weights_scale_terms() {
        let probs = Array2::from_elem((1, 7), 1.0 / 7.0);
        let t = one_hot(&[1]).unwrap();
        let mut w = ClassWeights::uniform();
        w.0[1] = 3.0;
        let on = FocalLossConfig {
            use_class_weights: true,
            ..FocalLossConfig::cross_entropy()
        };
        let off = FocalLossConfig::cross_entropy();
        let a = focal_loss(&probs, &t, &on, Some(&w)).unwrap();
        let b = focal_loss(&probs, &t, &off, Some(&w)).unwrap();
        assert!((a - 3.0 * b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let logits = Array2::from_shape_simple_fn((4, 7), || rng.random_range(-2.0..2.0));
        let labels = [0usize, 3, 6, 2];
        let targets = smooth_labels(&one_hot(&labels).unwrap(), 0.1).unwrap();
        let cfg = FocalLossConfig::default();
        let f = |z: &Array2<f64>| focal_loss(&softmax_rows(z), &targets, &cfg, None).unwrap();
        let g = focal_loss_grad(&softmax_rows(&logits), &targets, &cfg, None).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..7 {
                let (mut zp, mut zm) = (logits.clone(), logits.clone());
                zp[[i, j]] += h;
                zm[[i, j]] -= h;
                let fd = (f(&zp) - f(&zm)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() <= 1e-3 * fd.abs().max(1e-8), "{fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_y() {
        let probs = softmax_rows(&array![[0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.4]]);
        let t = one_hot(&[2]).unwrap();
        let g = focal_loss_grad(&probs, &t, &FocalLossConfig::cross_entropy(), None).unwrap();
        let expected = &probs - &t;
        for (a, b) in g.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
