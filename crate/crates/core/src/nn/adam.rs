use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::Param;

/// Adam with decoupled weight decay, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient entry are left alone.
    pub fn step<'a, I>(&mut self, params: I, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64)
    where
        I: IntoIterator<Item = &'a mut Param>,
    {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let Some(g) = grads.get(&p.name) else { continue };
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            let decay = p.decay;
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    if decay {
                        *w -= lr * wd * *w;
                    }
                    *w -= lr * update;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Param::new("w", ndarray::arr1(&[1.0, -2.0]).into_dyn(), false);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ndarray::arr1(&[0.3, -5.0]).into_dyn());
        let mut adam = Adam::new(0.0);
        adam.step([&mut p], &grads, 0.01);
        let v = p.value.as_slice().unwrap();
        assert!((v[0] - 0.99).abs() < 1e-6);
        assert!((v[1] + 1.99).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new("w", ndarray::arr1(&[3.0]).into_dyn(), true);
        let mut adam = Adam::new(0.0);
        for _ in 0..2000 {
            let x = p.value[[0]];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), ndarray::arr1(&[2.0 * (x - 1.0)]).into_dyn());
            adam.step([&mut p], &grads, 0.05);
        }
        assert!((p.value[[0]] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn missing_gradient_leaves_param_untouched() {
        let mut p = Param::new("frozen", ndarray::arr1(&[1.0]).into_dyn(), true);
        let mut adam = Adam::new(0.1);
        adam.step([&mut p], &BTreeMap::new(), 0.1);
        assert_eq!(p.value[[0]], 1.0);
    }
}
