//! Minimal NHWC layers with hand-written backward passes.

pub mod adam;
pub mod attention;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    /// Whether weight decay applies (weights yes, biases and norm params no).
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>, decay: bool) -> Self {
        Param {
            name: name.into(),
            value,
            decay,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn mat(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-d param")
    }

    pub fn mat_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        self.value.view_mut().into_dimensionality::<Ix2>().expect("2-d param")
    }

    pub fn vec(&self) -> ArrayView1<'_, f64> {
        self.value.view().into_dimensionality::<Ix1>().expect("1-d param")
    }

    pub fn vec_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        self.value.view_mut().into_dimensionality::<Ix1>().expect("1-d param")
    }
}

pub fn he_normal<R: Rng>(rng: &mut R, fan_in: usize, shape: (usize, usize)) -> Array2<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

pub fn glorot_uniform<R: Rng>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    let limit = (6.0 / (shape.0 + shape.1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Fully connected layer, `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn from_weights(name: &str, weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Dense {
            weight: Param::new(format!("{name}.weight"), weight.into_dyn(), true),
            bias: Param::new(format!("{name}.bias"), bias.into_dyn(), false),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.mat()) + self.bias.vec()
    }

    /// Returns `(dW, db)` and, when asked, `dx`.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
        want_dx: bool,
    ) -> (Array2<f64>, Array1<f64>, Option<Array2<f64>>) {
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        let dx = want_dx.then(|| dy.dot(&self.weight.mat().t()));
        (dw, db, dx)
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn conv_out_size(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad).saturating_sub(kernel) / stride + 1
}

/// Square convolution in NHWC layout via im2col. The weight matrix has one
/// row per `(ky, kx, c_in)` triple and one column per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_ch;
        let weight = he_normal(rng, fan_in, (fan_in, out_ch));
        Self::from_weights(name, weight, Array1::zeros(out_ch), kernel, stride)
    }

    pub fn from_weights(
        name: &str,
        weight: Array2<f64>,
        bias: Array1<f64>,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Conv2d {
            weight: Param::new(format!("{name}.weight"), weight.into_dyn(), true),
            bias: Param::new(format!("{name}.bias"), bias.into_dyn(), false),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[0] / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.kernel, self.stride, self.pad),
            conv_out_size(w, self.kernel, self.stride, self.pad),
        )
    }

    /// Returns the output together with the im2col matrix needed by
    /// [`Conv2d::backward`].
    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (b, h, w, _) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.pad);
        let y = cols.dot(&self.weight.mat()) + self.bias.vec();
        let y = y
            .into_shape_with_order((b, oh, ow, self.out_channels()))
            .expect("contiguous matmul output");
        (y, cols)
    }

    pub fn backward(
        &self,
        cols: &Array2<f64>,
        dy: &Array4<f64>,
        input_shape: (usize, usize, usize, usize),
        want_params: bool,
        want_dx: bool,
    ) -> (Option<(Array2<f64>, Array1<f64>)>, Option<Array4<f64>>) {
        let (b, oh, ow, co) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * oh * ow, co))
            .expect("contiguous");
        let params = want_params.then(|| (cols.t().dot(&dy2), dy2.sum_axis(Axis(0))));
        let dx = want_dx.then(|| {
            let dcols = dy2.dot(&self.weight.mat().t());
            col2im(&dcols, input_shape, self.kernel, self.stride, self.pad)
        });
        (params, dx)
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn im2col(x: &Array4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let x = x.as_standard_layout();
    let (b, h, w, c) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let row_len = k * k * c;
    let mut cols = vec![0.0; b * oh * ow * row_len];
    let src = x.as_slice().expect("standard layout");
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let d = row + (ky * k + kx) * c;
                        cols[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((b * oh * ow, row_len), cols).expect("sized")
}

pub fn col2im(
    cols: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, h, w, c) = shape;
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let row_len = k * k * c;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let s = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            out[d + ch] += src[s + ch];
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(shape, out).expect("sized")
}

/// Batch normalization over the feature axis of a `B x C` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

impl BatchNorm1d {
    pub fn new(name: &str, features: usize) -> Self {
        BatchNorm1d {
            gamma: Param::new(format!("{name}.gamma"), Array1::ones(features).into_dyn(), false),
            beta: Param::new(format!("{name}.beta"), Array1::zeros(features).into_dyn(), false),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: 0.1,
            eps: 1e-3,
        }
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// estimates; inference mode uses the running estimates.
    pub fn forward(&mut self, x: &Array2<f64>, training: bool) -> (Array2<f64>, BatchNormCache) {
        let b = x.nrows();
        if training && b > 1 {
            let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
            let centered = x - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty");
            let unbiased = &var * (b as f64 / (b as f64 - 1.0));
            self.running_mean = &self.running_mean * (1.0 - self.momentum) + &mean * self.momentum;
            self.running_var = &self.running_var * (1.0 - self.momentum) + &unbiased * self.momentum;
            let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let xhat = centered * &inv_std;
            let y = &xhat * &self.gamma.vec() + self.beta.vec();
            (
                y,
                BatchNormCache {
                    xhat,
                    inv_std,
                    batch_stats: true,
                },
            )
        } else {
            self.forward_eval(x)
        }
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> (Array2<f64>, BatchNormCache) {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (x - &self.running_mean) * &inv_std;
        let y = &xhat * &self.gamma.vec() + self.beta.vec();
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats: false,
            },
        )
    }

    /// Returns `(dgamma, dbeta, dx)`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        dy: &Array2<f64>,
    ) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
        let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma.vec();
        let dx = if cache.batch_stats {
            let b = dy.nrows() as f64;
            let sum = dxhat.sum_axis(Axis(0));
            let dot = (&dxhat * &cache.xhat).sum_axis(Axis(0));
            let inner = &dxhat * b - &sum - &cache.xhat * &dot;
            inner * &(&cache.inv_std / b)
        } else {
            dxhat * &cache.inv_std
        };
        (dgamma, dbeta, dx)
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` where the forward ReLU output was not positive.
pub fn relu_backward<D: ndarray::Dimension>(
    dy: &mut ndarray::Array<f64, D>,
    out: &ndarray::Array<f64, D>,
) {
    ndarray::Zip::from(dy).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
