use crate::error::{Error, Result};

/// `floor + (base - floor) * (1 + cos(pi * step / total)) / 2` with
/// `floor = floor_fraction * base`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, floor_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps", "must be >= 1"));
    }
    if step > total_steps {
        return Err(Error::invalid("step", format!("{step} exceeds total {total_steps}")));
    }
    if step == 0 {
        return Ok(base_lr);
    }
    let floor = floor_fraction * base_lr;
    if step == total_steps {
        return Ok(floor);
    }
    let cos = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
    Ok(floor + 0.5 * (base_lr - floor) * (1.0 + cos))
}

/// Schedule length for a stage of `epochs` epochs, stepped once per epoch so
/// that the last epoch runs at the floor.
pub fn schedule_steps(epochs: usize) -> usize {
    epochs.saturating_sub(1).max(1)
}

/// True once the best value (first occurrence, higher is better) is more than
/// `patience` epochs old. Ties never count as an improvement.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    if history.is_empty() {
        return false;
    }
    let mut best = 0;
    for (i, v) in history.iter().enumerate() {
        if *v > history[best] {
            best = i;
        }
    }
    history.len() - 1 - best > patience
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 0.01).unwrap(), 1e-3);
        assert_eq!(cosine_lr(10, 10, 1e-3, 0.01).unwrap(), 1e-5);
        let mid = cosine_lr(5, 10, 1e-3, 0.01).unwrap();
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 1e-3, 0.01).is_err());
        assert!(cosine_lr(0, 0, 1e-3, 0.01).is_err());
    }

    #[test]
    fn cosine_monotone() {
        let lrs: Vec<f64> = (0..=20).map(|s| cosine_lr(s, 20, 0.1, 0.01).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn early_stopping() {
        let improving: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert!(!early_stop_check(&improving, 1));
        assert!(!early_stop_check(&[], 3));
        let mut h = vec![0.9];
        h.extend([0.5; 10]);
        assert!(!early_stop_check(&h, 10));
        h.push(0.5);
        assert!(early_stop_check(&h, 10));
        // Ties with the best do not reset the counter.
        let ties = [0.8, 0.8, 0.8, 0.8, 0.8];
        assert!(!early_stop_check(&ties[..3], 2));
        assert!(early_stop_check(&ties[..4], 2));
        assert!(early_stop_check(&ties, 3));
    }
}
