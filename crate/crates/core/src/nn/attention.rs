//! Channel attention gated by both average- and max-pooled channel
//! descriptors passed through one shared two-layer MLP.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use super::{glorot_uniform, he_normal, sigmoid, Dense, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    pub reduction_ratio: usize,
    /// `C -> C / r`, ReLU.
    pub squeeze: Dense,
    /// `C / r -> C`, sigmoid after the two branches are summed.
    pub excite: Dense,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Array4<f64>,
    avg: Array2<f64>,
    max: Array2<f64>,
    argmax: Vec<usize>,
    hidden_avg: Array2<f64>,
    hidden_max: Array2<f64>,
    pub gate: Array2<f64>,
}

pub fn hidden_width(channels: usize, reduction_ratio: usize) -> usize {
    (channels / reduction_ratio.max(1)).max(1)
}

impl ChannelAttention {
    pub fn new<R: Rng>(channels: usize, reduction_ratio: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("channels", "channel attention needs C > 0"));
        }
        if reduction_ratio == 0 {
            return Err(Error::invalid("reduction_ratio", "must be >= 1"));
        }
        let hidden = hidden_width(channels, reduction_ratio);
        Ok(ChannelAttention {
            reduction_ratio,
            squeeze: Dense::from_weights(
                "attention.squeeze",
                he_normal(rng, channels, (channels, hidden)),
                Array1::zeros(hidden),
            ),
            excite: Dense::from_weights(
                "attention.excite",
                glorot_uniform(rng, (hidden, channels)),
                Array1::zeros(channels),
            ),
        })
    }

    /// All weights and biases zero: every gate is exactly `sigmoid(0) = 0.5`.
    pub fn zeros(channels: usize, reduction_ratio: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("channels", "channel attention needs C > 0"));
        }
        let hidden = hidden_width(channels, reduction_ratio);
        Ok(ChannelAttention {
            reduction_ratio,
            squeeze: Dense::from_weights(
                "attention.squeeze",
                Array2::zeros((channels, hidden)),
                Array1::zeros(hidden),
            ),
            excite: Dense::from_weights(
                "attention.excite",
                Array2::zeros((hidden, channels)),
                Array1::zeros(channels),
            ),
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.in_features()
    }

    fn mlp(&self, v: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut hidden = self.squeeze.forward(&v.view());
        super::relu_inplace(&mut hidden);
        let out = self.excite.forward(&hidden.view());
        (hidden, out)
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, AttentionCache)> {
        let (b, h, w, c) = x.dim();
        if c == 0 {
            return Err(Error::invalid("features", "zero channels"));
        }
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "attention built for {} channels, got {c}",
                self.channels()
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("attention input has no spatial extent".into()));
        }
        let hw = h * w;
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, hw, c))
            .expect("contiguous");
        let avg = flat.mean_axis(Axis(1)).expect("hw > 0");
        let mut max = Array2::from_elem((b, c), f64::NEG_INFINITY);
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for p in 0..hw {
                for ch in 0..c {
                    let v = flat[[bi, p, ch]];
                    if v > max[[bi, ch]] {
                        max[[bi, ch]] = v;
                        argmax[bi * c + ch] = p;
                    }
                }
            }
        }
        let (hidden_avg, z_avg) = self.mlp(&avg);
        let (hidden_max, z_max) = self.mlp(&max);
        let gate = (z_avg + z_max).mapv(sigmoid);
        let mut out = x.to_owned();
        for bi in 0..b {
            let g = gate.row(bi);
            for mut px in out.index_axis_mut(Axis(0), bi).lanes_mut(Axis(2)) {
                px *= &g;
            }
        }
        Ok((
            out,
            AttentionCache {
                input: x.to_owned(),
                avg,
                max,
                argmax,
                hidden_avg,
                hidden_max,
                gate,
            },
        ))
    }

    /// Returns parameter gradients in `params()` order plus `dx` when asked.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array4<f64>,
        want_params: bool,
        want_dx: bool,
    ) -> (Option<[ndarray::ArrayD<f64>; 4]>, Option<Array4<f64>>) {
        let (b, h, w, c) = dy.dim();
        let hw = (h * w) as f64;
        let x = &cache.input;

        let mut dgate = Array2::zeros((b, c));
        for bi in 0..b {
            let prod = &dy.index_axis(Axis(0), bi) * &x.index_axis(Axis(0), bi);
            dgate
                .row_mut(bi)
                .assign(&prod.sum_axis(Axis(0)).sum_axis(Axis(0)));
        }
        let dz = dgate * &cache.gate.mapv(|g| g * (1.0 - g));

        let branch = |v: &Array2<f64>, hidden: &Array2<f64>| {
            let (dw2, db2, dh) = self.excite.backward(&hidden.view(), &dz.view(), true);
            let mut dh = dh.expect("requested");
            super::relu_backward(&mut dh, hidden);
            let (dw1, db1, dv) = self.squeeze.backward(&v.view(), &dh.view(), want_dx);
            (dw1, db1, dw2, db2, dv)
        };
        let (aw1, ab1, aw2, ab2, dv_avg) = branch(&cache.avg, &cache.hidden_avg);
        let (mw1, mb1, mw2, mb2, dv_max) = branch(&cache.max, &cache.hidden_max);

        let params = want_params.then(|| {
            [
                (aw1 + mw1).into_dyn(),
                (ab1 + mb1).into_dyn(),
                (aw2 + mw2).into_dyn(),
                (ab2 + mb2).into_dyn(),
            ]
        });

        let dx = want_dx.then(|| {
            let dv_avg = dv_avg.expect("requested");
            let dv_max = dv_max.expect("requested");
            let mut dx = dy.to_owned();
            for bi in 0..b {
                let g = cache.gate.row(bi);
                let da = dv_avg.row(bi).mapv(|v| v / hw);
                let mut plane = dx.index_axis_mut(Axis(0), bi);
                for mut px in plane.lanes_mut(Axis(2)) {
                    px *= &g;
                    px += &da;
                }
                for ch in 0..c {
                    let p = cache.argmax[bi * c + ch];
                    plane[[p / w, p % w, ch]] += dv_max[[bi, ch]];
                }
            }
            dx
        });
        (params, dx)
    }

    pub fn params(&self) -> [&Param; 4] {
        let [a, b] = self.squeeze.params();
        let [c, d] = self.excite.params();
        [a, b, c, d]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 4] {
        let [a, b] = self.squeeze.params_mut();
        let [c, d] = self.excite.params_mut();
        [a, b, c, d]
    }
}

/// Stand-alone channel attention: `x * sigmoid(MLP(avg) + MLP(max))`.
pub fn channel_attention(features: &Array4<f64>, params: &ChannelAttention) -> Result<Array4<f64>> {
    params.forward(features).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_features(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let att = ChannelAttention::zeros(8, 4).unwrap();
        let x = random_features(0, (2, 3, 3, 8));
        let y = channel_attention(&x, &att).unwrap();
        assert!((&y - &(&x * 0.5)).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn constant_map_two_channel_hand_computation() {
        // C = 2, r = 2 -> one hidden unit.
        let mut att = ChannelAttention::zeros(2, 2).unwrap();
        att.squeeze.weight.value = ndarray::arr2(&[[0.5], [-1.0]]).into_dyn();
        att.squeeze.bias.value = ndarray::arr1(&[0.25]).into_dyn();
        att.excite.weight.value = ndarray::arr2(&[[2.0, -0.5]]).into_dyn();
        att.excite.bias.value = ndarray::arr1(&[0.1, 0.2]).into_dyn();
        let x = Array4::from_shape_fn((1, 2, 3, 2), |(_, _, _, c)| if c == 0 { 0.8 } else { 0.3 });
        // hidden = relu(0.5*0.8 - 1.0*0.3 + 0.25) = 0.35
        // mlp = (2*0.35 + 0.1, -0.5*0.35 + 0.2) = (0.8, 0.025); gate = sigmoid(2*mlp)
        let g0 = 1.0 / (1.0 + (-1.6f64).exp());
        let g1 = 1.0 / (1.0 + (-0.05f64).exp());
        let y = channel_attention(&x, &att).unwrap();
        for yy in 0..2 {
            for xx in 0..3 {
                assert!((y[[0, yy, xx, 0]] - 0.8 * g0).abs() < 1e-12);
                assert!((y[[0, yy, xx, 1]] - 0.3 * g1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_gate_recovers_input() {
        let mut att = ChannelAttention::zeros(4, 2).unwrap();
        att.excite.bias.value.fill(50.0);
        let x = random_features(1, (1, 2, 2, 4));
        let y = channel_attention(&x, &att).unwrap();
        assert!((&y - &x).iter().all(|d| d.abs() < 1e-4));
    }

    #[test]
    fn rejects_empty_and_mismatched_inputs() {
        assert!(ChannelAttention::zeros(0, 16).is_err());
        let att = ChannelAttention::zeros(4, 2).unwrap();
        assert!(channel_attention(&Array4::zeros((1, 2, 2, 3)), &att).is_err());
        assert!(channel_attention(&Array4::zeros((1, 0, 2, 4)), &att).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let att = ChannelAttention::new(6, 2, &mut rng).unwrap();
        let x = random_features(6, (2, 3, 2, 6));
        let dy = random_features(7, (2, 3, 2, 6));
        let (_, cache) = att.forward(&x).unwrap();
        let (grads, dx) = att.backward(&cache, &dy, true, true);
        let grads = grads.unwrap();
        let dx = dx.unwrap();
        let loss = |att: &ChannelAttention, x: &Array4<f64>| (channel_attention(x, att).unwrap() * &dy).sum();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 2, 1, 5], [0, 1, 1, 3], [1, 0, 1, 2]] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            let fd = (loss(&att, &xp) - loss(&att, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx{idx:?}: {fd} vs {}", dx[idx]);
        }
        for (pi, g) in grads.iter().enumerate() {
            for flat in [0, g.len() / 2, g.len() - 1] {
                let (mut ap, mut am) = (att.clone(), att.clone());
                ap.params_mut()[pi].value.as_slice_mut().unwrap()[flat] += h;
                am.params_mut()[pi].value.as_slice_mut().unwrap()[flat] -= h;
                let fd = (loss(&ap, &x) - loss(&am, &x)) / (2.0 * h);
                let an = g.as_slice().unwrap()[flat];
                assert!((fd - an).abs() < 1e-6, "param {pi}[{flat}]: {fd} vs {an}");
            }
        }
    }
}
