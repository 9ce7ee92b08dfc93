//! Minimal layer kit with explicit forward/backward passes.
//!
//! Activations are `(positions, channels)` matrices: one row per spatial
//! position (or token) with the channel vector contiguous, so convolutions
//! become im2col + GEMM and linear layers act on rows directly.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf::erf;
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_2_SQRT_PI};

/// Named parameter traversal, used by the optimizer and checkpoints.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, mut a| a.fill(value));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Spatial feature map: `n` images of `h x w` positions, rows in
/// `(image, row, column)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

fn he_normal(rng: &mut impl Rng, fan_in: usize, shape: (usize, usize)) -> Array2<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

pub(crate) fn truncated_normal(rng: &mut impl Rng, std: f64, shape: (usize, usize)) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// 2-D convolution over a [`FeatureMap`], weights laid out as
/// `(kernel_row, kernel_col, in_channel) x out_channel`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            weight: he_normal(rng, fan_in, (fan_in, out_channels)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let out = |len: usize| (len + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(h), out(w))
    }

    fn im2col(&self, x: &FeatureMap) -> Array2<f64> {
        let (oh, ow) = self.output_size(x.h, x.w);
        let c = self.in_channels;
        let k = self.kernel;
        let mut cols = Array2::<f64>::zeros((x.n * oh * ow, k * k * c));
        let src = x.data.as_slice().expect("feature maps are contiguous");
        let dst = cols.as_slice_mut().expect("fresh array is contiguous");
        let width = k * k * c;
        for img in 0..x.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (img * oh + oy) * ow + ox;
                    let out = &mut dst[row * width..(row + 1) * width];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let in_row = (img * x.h + iy as usize) * x.w + ix as usize;
                            let o = (ky * k + kx) * c;
                            out[o..o + c].copy_from_slice(&src[in_row * c..(in_row + 1) * c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, n: usize, h: usize, w: usize) -> Array2<f64> {
        let (oh, ow) = self.output_size(h, w);
        let c = self.in_channels;
        let k = self.kernel;
        let width = k * k * c;
        let mut dx = Array2::<f64>::zeros((n * h * w, c));
        let src = dcols.as_slice().expect("contiguous gradient");
        let dst = dx.as_slice_mut().expect("fresh array is contiguous");
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (img * oh + oy) * ow + ox;
                    let patch = &src[row * width..(row + 1) * width];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_row = (img * h + iy as usize) * w + ix as usize;
                            let o = (ky * k + kx) * c;
                            for (d, s) in dst[in_row * c..(in_row + 1) * c].iter_mut().zip(&patch[o..o + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output map and the im2col matrix needed for backward.
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Array2<f64>) {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.h, x.w);
        let cols = self.im2col(x);
        let mut out = Array2::<f64>::zeros((cols.nrows(), self.out_channels));
        out.assign(&self.bias.broadcast((cols.nrows(), self.out_channels)).unwrap());
        general_mat_mul(1.0, &cols, &self.weight, 1.0, &mut out);
        (
            FeatureMap {
                n: x.n,
                h: oh,
                w: ow,
                data: out,
            },
            cols,
        )
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `input_shape` is given.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        dout: &Array2<f64>,
        grad: &mut Conv2d,
        input_shape: Option<(usize, usize, usize)>,
    ) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &cols.t(), dout, 1.0, &mut grad.weight);
        grad.bias += &dout.sum_axis(Axis(0));
        input_shape.map(|(n, h, w)| {
            let mut dcols = Array2::<f64>::zeros(cols.raw_dim());
            general_mat_mul(1.0, dout, &self.weight.t(), 0.0, &mut dcols);
            self.col2im(&dcols, n, h, w)
        })
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Row-wise affine map `y = x W + b`, `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: truncated_normal(rng, 0.02, (input, output)),
            bias: Some(Array1::zeros(output)),
        }
    }

    pub fn no_bias(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: truncated_normal(rng, 0.02, (input, output)),
            bias: None,
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((x.nrows(), self.weight.ncols()));
        let beta = match &self.bias {
            Some(b) => {
                let dim = out.raw_dim();
                out.assign(&b.broadcast(dim).unwrap());
                1.0
            }
            None => 0.0,
        };
        general_mat_mul(1.0, x, &self.weight, beta, &mut out);
        out
    }

    pub fn backward(&self, x: &ArrayView2<f64>, dout: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dout, 1.0, &mut grad.weight);
        if let Some(b) = grad.bias.as_mut() {
            *b += &dout.sum_axis(Axis(0));
        }
        let mut dx = Array2::<f64>::zeros((dout.nrows(), self.weight.nrows()));
        general_mat_mul(1.0, dout, &self.weight.t(), 0.0, &mut dx);
        dx
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b.view_mut().into_dyn());
        }
    }
}

/// Layer normalization over the channel axis of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

/// Saved normalized activations and inverse standard deviations.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let c = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::<f64>::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / c;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            *inv = 1.0 / (var + self.eps).sqrt();
            row *= *inv;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let c = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::<f64>::zeros(dy.raw_dim());
        for (((mut out, g), xh), inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / c;
            let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = inv * (gi - mean_g - xi * mean_gx);
            });
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.gamma.view().into_dyn());
        f(&join(prefix, "bias"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.gamma.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.beta.view_mut().into_dyn());
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient of ReLU given its output.
pub fn relu_backward(output: &Array2<f64>, dout: &mut Array2<f64>) {
    Zip::from(dout).and(output).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() * FRAC_1_SQRT_2 * FRAC_2_SQRT_PI * 0.5;
    cdf + x * pdf
}

/// Mean over the positions of each image: `(n*h*w, c) -> (n, c)`.
pub fn global_avg_pool(x: &FeatureMap) -> Array2<f64> {
    let per = x.h * x.w;
    let mut out = Array2::<f64>::zeros((x.n, x.channels()));
    for (img, mut row) in out.rows_mut().into_iter().enumerate() {
        let block = x.data.slice(ndarray::s![img * per..(img + 1) * per, ..]);
        row.assign(&block.sum_axis(Axis(0)));
        row /= per as f64;
    }
    out
}

pub fn global_avg_pool_backward(dout: &Array2<f64>, n: usize, h: usize, w: usize) -> Array2<f64> {
    let per = h * w;
    let mut dx = Array2::<f64>::zeros((n * per, dout.ncols()));
    for img in 0..n {
        let g = dout.row(img).mapv(|v| v / per as f64);
        dx.slice_mut(ndarray::s![img * per..(img + 1) * per, ..])
            .assign(&g.broadcast((per, dout.ncols())).unwrap());
    }
    dx
}

/// Maximum over the positions of each image and the winning row per
/// `(image, channel)`; ties keep the first position.
pub fn global_max_pool(x: &FeatureMap) -> (Array2<f64>, Vec<usize>) {
    let per = x.h * x.w;
    let c = x.channels();
    let mut out = Array2::<f64>::from_elem((x.n, c), f64::NEG_INFINITY);
    let mut arg = vec![0usize; x.n * c];
    for img in 0..x.n {
        for r in img * per..(img + 1) * per {
            for (j, &v) in x.data.row(r).iter().enumerate() {
                if v > out[[img, j]] {
                    out[[img, j]] = v;
                    arg[img * c + j] = r;
                }
            }
        }
    }
    (out, arg)
}

pub fn global_max_pool_backward(dout: &Array2<f64>, argmax: &[usize], rows: usize) -> Array2<f64> {
    let c = dout.ncols();
    let mut dx = Array2::<f64>::zeros((rows, c));
    for ((img, j), &g) in dout.indexed_iter() {
        dx[[argmax[img * c + j], j]] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap {
            n,
            h,
            w,
            data: Array2::from_shape_simple_fn((n * h * w, c), || rng.random::<f64>() - 0.5),
        }
    }

    /// Direct nested-loop convolution, independent of im2col.
    fn naive_conv(conv: &Conv2d, x: &FeatureMap) -> Array2<f64> {
        let (oh, ow) = conv.output_size(x.h, x.w);
        let mut out = Array2::<f64>::zeros((x.n * oh * ow, conv.out_channels));
        for img in 0..x.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..conv.out_channels {
                        let mut acc = conv.bias[co];
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let r = (img * x.h + iy as usize) * x.w + ix as usize;
                                for ci in 0..conv.in_channels {
                                    let wrow = (ky * conv.kernel + kx) * conv.in_channels + ci;
                                    acc += x.data[[r, ci]] * conv.weight[[wrow, co]];
                                }
                            }
                        }
                        out[[(img * oh + oy) * ow + ox, co]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 4, 0), (2, 2, 0)] {
            let mut conv = Conv2d::new(3, 5, k, s, p, &mut rng);
            conv.bias = Array1::from_shape_simple_fn(5, || rng.random::<f64>());
            let x = rand_map(&mut rng, 2, 9, 8, 3);
            let (y, _) = conv.forward(&x);
            let expected = naive_conv(&conv, &x);
            let diff = (&y.data - &expected).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "k={k} s={s} p={p}: {diff}");
        }
    }

    /// Finite-difference check of a scalar loss `sum(y * r)` for random `r`.
    fn check_conv_grads(k: usize, s: usize, p: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, k, s, p, &mut rng);
        let x = rand_map(&mut rng, 2, 7, 6, 2);
        let (y, cols) = conv.forward(&x);
        let r = Array2::from_shape_simple_fn(y.data.raw_dim(), || rng.random::<f64>() - 0.5);
        let loss = |c: &Conv2d, xm: &FeatureMap| (&c.forward(xm).0.data * &r).sum();
        let mut grad = conv.clone();
        grad.fill(0.0);
        let dx = conv.backward(&cols, &r, &mut grad, Some((x.n, x.h, x.w))).unwrap();
        let eps = 1e-6;
        for idx in [(0, 0), (3, 1), (k * k * 2 - 1, 2)] {
            let mut plus = conv.clone();
            plus.weight[idx] += eps;
            let mut minus = conv.clone();
            minus.weight[idx] -= eps;
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * eps);
            assert!(
                (fd - grad.weight[idx]).abs() < 1e-7,
                "dW{idx:?}: {fd} vs {}",
                grad.weight[idx]
            );
        }
        for idx in [(0, 0), (17, 1), (x.data.nrows() - 1, 0)] {
            let mut plus = x.clone();
            plus.data[idx] += eps;
            let mut minus = x.clone();
            minus.data[idx] -= eps;
            let fd = (loss(&conv, &plus) - loss(&conv, &minus)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7, "dx{idx:?}: {fd} vs {}", dx[idx]);
        }
        let b_fd = r.sum_axis(Axis(0));
        assert!((&b_fd - &grad.bias).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_conv_grads(3, 1, 1);
        check_conv_grads(3, 2, 1);
        check_conv_grads(2, 2, 0);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ln = LayerNorm::new(5);
        ln.gamma = Array1::from_shape_simple_fn(5, || rng.random::<f64>() + 0.5);
        ln.beta = Array1::from_shape_simple_fn(5, || rng.random::<f64>());
        let x = Array2::from_shape_simple_fn((4, 5), || rng.random::<f64>() * 3.0);
        let r = Array2::from_shape_simple_fn((4, 5), || rng.random::<f64>() - 0.5);
        let loss = |l: &LayerNorm, x: &Array2<f64>| (&l.forward(&x.view()).0 * &r).sum();
        let (_, cache) = ln.forward(&x.view());
        let mut grad = ln.clone();
        grad.fill(0.0);
        let dx = ln.backward(&cache, &r, &mut grad);
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..5 {
                let mut p = x.clone();
                p[[i, j]] += eps;
                let mut m = x.clone();
                m[[i, j]] -= eps;
                let fd = (loss(&ln, &p) - loss(&ln, &m)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
        for j in 0..5 {
            let mut p = ln.clone();
            p.gamma[j] += eps;
            let mut m = ln.clone();
            m.gamma[j] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.gamma[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear::new(3, 2, &mut rng);
        let x = Array2::from_shape_simple_fn((5, 3), || rng.random::<f64>());
        let r = Array2::from_shape_simple_fn((5, 2), || rng.random::<f64>() - 0.5);
        let mut grad = lin.clone();
        grad.fill(0.0);
        let dx = lin.backward(&x.view(), &r, &mut grad);
        let loss = |l: &Linear, x: &Array2<f64>| (&l.forward(&x.view()) * &r).sum();
        let eps = 1e-6;
        let mut p = x.clone();
        p[[2, 1]] += eps;
        let mut m = x.clone();
        m[[2, 1]] -= eps;
        let fd = (loss(&lin, &p) - loss(&lin, &m)) / (2.0 * eps);
        assert!((fd - dx[[2, 1]]).abs() < 1e-8);
        let mut p = lin.clone();
        p.weight[[1, 0]] += eps;
        let mut m = lin.clone();
        m.weight[[1, 0]] -= eps;
        let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
        assert!((fd - grad.weight[[1, 0]]).abs() < 1e-8);
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn avg_pool_round_trip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_map(&mut rng, 3, 4, 5, 2);
        let y = global_avg_pool(&x);
        assert_eq!(y.dim(), (3, 2));
        let manual: f64 = (0..20).map(|r| x.data[[20 + r, 1]]).sum::<f64>() / 20.0;
        assert!((y[[1, 1]] - manual).abs() < 1e-14);
        let dy = Array2::from_elem((3, 2), 1.0);
        let dx = global_avg_pool_backward(&dy, 3, 4, 5);
        assert!(dx.iter().all(|&v| (v - 0.05).abs() < 1e-15));
    }
}
