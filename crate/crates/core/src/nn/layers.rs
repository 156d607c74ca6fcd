use rand::Rng;
use rayon::prelude::*;

use super::{scoped, Layer, NnError, NnResult, Phase, Scalar, Tensor};

fn kaiming_uniform<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn cast_vec<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// 2-D convolution over `[N, C, H, W]` inputs, lowered to im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    in_shape: [usize; 4],
    out_hw: (usize, usize),
    cols: Vec<Vec<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-uniform weights; bias (if any) starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let n = out_channels * fan_in;
        let w = kaiming_uniform(n, fan_in, rng);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::param(
                &[out_channels, in_channels, kernel.0, kernel.1],
                cast_vec(&w),
            ),
            bias: bias.then(|| Tensor::param(&[out_channels], vec![T::zero(); out_channels])),
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> NnResult<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(NnError::ShapeMismatch(format!(
                "conv input {h}x{w} smaller than kernel {kh}x{kw}"
            )));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let hw_out = ho * wo;
        let mut cols = vec![T::zero(); self.col_rows() * hw_out];
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..ho {
                        let y = (oy * sh + i) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let src = &plane[y as usize * w..(y as usize + 1) * w];
                        for ox in 0..wo {
                            let xx = (ox * sw + j) as isize - pw as isize;
                            if xx >= 0 && xx < w as isize {
                                dst[oy * wo + ox] = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let hw_out = ho * wo;
        let mut x = vec![T::zero(); self.in_channels * h * w];
        for c in 0..self.in_channels {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..ho {
                        let y = (oy * sh + i) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let xx = (ox * sw + j) as isize - pw as isize;
                            if xx >= 0 && xx < w as isize {
                                plane[y as usize * w + xx as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, input: &Tensor<T>, _phase: Phase) -> NnResult<Tensor<T>> {
        input.expect_rank(4, "conv2d input")?;
        let s = input.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if c != self.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let oc = self.out_channels;
        let kk = self.col_rows();
        let this = &*self;
        let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|b| {
                let x = &input.data[b * c * h * w..(b + 1) * c * h * w];
                let cols = this.im2col(x, h, w, ho, wo);
                let mut out = vec![T::zero(); oc * ho * wo];
                T::gemm(false, false, oc, kk, ho * wo, T::one(), &this.weight.data, &cols, T::zero(), &mut out);
                if let Some(bias) = &this.bias {
                    for (o, row) in out.chunks_mut(ho * wo).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias.data[o]);
                    }
                }
                (cols, out)
            })
            .collect();
        let mut data = Vec::with_capacity(n * oc * ho * wo);
        let mut cols = Vec::with_capacity(n);
        for (col, out) in per_sample {
            cols.push(col);
            data.extend_from_slice(&out);
        }
        self.cache = Some(ConvCache {
            in_shape: [n, c, h, w],
            out_hw: (ho, wo),
            cols,
        });
        Tensor::from_vec(&[n, oc, ho, wo], data)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        let [n, c, h, w] = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let oc = self.out_channels;
        upstream.expect_shape(&[n, oc, ho, wo], "conv2d upstream")?;
        let kk = self.col_rows();
        let hw = ho * wo;
        let this = &*self;
        let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|b| {
                let dy = &upstream.data[b * oc * hw..(b + 1) * oc * hw];
                let mut dw = vec![T::zero(); oc * kk];
                T::gemm(false, true, oc, hw, kk, T::one(), dy, &cache.cols[b], T::zero(), &mut dw);
                let mut dcols = vec![T::zero(); kk * hw];
                T::gemm(true, false, kk, oc, hw, T::one(), &this.weight.data, dy, T::zero(), &mut dcols);
                (dw, this.col2im(&dcols, h, w, ho, wo))
            })
            .collect();
        let mut dx = Vec::with_capacity(n * c * h * w);
        let mut dw_total = vec![T::zero(); oc * kk];
        for (dw, dxs) in per_sample {
            dw_total.iter_mut().zip(&dw).for_each(|(a, b)| *a += *b);
            dx.extend_from_slice(&dxs);
        }
        self.weight
            .grad_mut()
            .iter_mut()
            .zip(&dw_total)
            .for_each(|(g, d)| *g += *d);
        if let Some(bias) = &mut self.bias {
            let g = bias.grad_mut();
            for b in 0..n {
                for o in 0..oc {
                    let row = &upstream.data[(b * oc + o) * hw..(b * oc + o + 1) * hw];
                    g[o] += row.iter().copied().sum::<T>();
                }
            }
        }
        Tensor::from_vec(&[n, c, h, w], dx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

/// Per-channel batch normalization over `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    shape: [usize; 4],
    xhat: Vec<T>,
    inv_std: Vec<T>,
    phase: Phase,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Tensor::param(&[channels], vec![T::one(); channels]),
            beta: Tensor::param(&[channels], vec![T::zero(); channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels]).unwrap(),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, input: &Tensor<T>, phase: Phase) -> NnResult<Tensor<T>> {
        input.expect_rank(4, "batchnorm input")?;
        let s = input.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if c != self.channels {
            return Err(NnError::ShapeMismatch(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        let m = n * hw;
        if m == 0 {
            return Err(NnError::EmptyInput);
        }
        let eps = T::lit(self.eps);
        let mut xhat = vec![T::zero(); input.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let plane = |b: usize| &input.data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let (mean, var) = match phase {
                Phase::Train => {
                    let mut sum = 0.0;
                    for b in 0..n {
                        sum += plane(b).iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mean = sum / m as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += plane(b).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                    }
                    let var = sq / m as f64;
                    let mom = self.momentum;
                    let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                    let rm = &mut self.running_mean.data[ch];
                    *rm = T::lit((1.0 - mom) * rm.as_f64() + mom * mean);
                    let rv = &mut self.running_var.data[ch];
                    *rv = T::lit((1.0 - mom) * rv.as_f64() + mom * unbiased);
                    (T::lit(mean), T::lit(var))
                }
                Phase::Infer => (self.running_mean.data[ch], self.running_var.data[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in 0..hw {
                    xhat[off + i] = (input.data[off + i] - mean) * is;
                }
            }
        }
        let mut out = xhat.clone();
        for b in 0..n {
            for ch in 0..c {
                let (g, be) = (self.gamma.data[ch], self.beta.data[ch]);
                let off = (b * c + ch) * hw;
                out[off..off + hw].iter_mut().for_each(|v| *v = *v * g + be);
            }
        }
        self.cache = Some(BnCache {
            shape: [n, c, h, w],
            xhat,
            inv_std,
            phase,
        });
        Tensor::from_vec(s, out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        let [n, c, h, w] = cache.shape;
        upstream.expect_shape(&cache.shape, "batchnorm upstream")?;
        let hw = h * w;
        let m = T::lit((n * hw) as f64);
        let mut dx = vec![T::zero(); upstream.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let g = self.gamma.data[ch];
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in 0..hw {
                    let dy = upstream.data[off + i];
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.xhat[off + i];
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let is = cache.inv_std[ch];
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in 0..hw {
                    let dy = upstream.data[off + i];
                    dx[off + i] = match cache.phase {
                        Phase::Train => {
                            g * is / m * (m * dy - sum_dy - cache.xhat[off + i] * sum_dy_xhat)
                        }
                        Phase::Infer => g * is * dy,
                    };
                }
            }
        }
        self.gamma.grad_mut().iter_mut().zip(&dgamma).for_each(|(a, b)| *a += *b);
        self.beta.grad_mut().iter_mut().zip(&dbeta).for_each(|(a, b)| *a += *b);
        Tensor::from_vec(&cache.shape, dx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, input: &Tensor<T>, _phase: Phase) -> NnResult<Tensor<T>> {
        let out = input.data.iter().map(|&v| v.max(T::zero())).collect();
        self.input = Some(input.clone());
        Tensor::from_vec(input.shape(), out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let x = self.input.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        upstream.expect_shape(x.shape(), "relu upstream")?;
        let dx = x
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        Tensor::from_vec(x.shape(), dx)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    (-x.abs()).exp().ln_1p() + x.max(T::zero())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x · tanh(softplus(x))`.
pub fn mish<T: Scalar>(x: T) -> T {
    x * softplus(x).tanh()
}

/// Derivative of [`mish`].
pub fn mish_grad<T: Scalar>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}

#[derive(Debug, Clone, Default)]
pub struct Mish<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Mish<T> {
    pub fn new() -> Self {
        Self { input: None }
    }
}

impl<T: Scalar> Layer<T> for Mish<T> {
    fn forward(&mut self, input: &Tensor<T>, _phase: Phase) -> NnResult<Tensor<T>> {
        let out = input.data.iter().map(|&v| mish(v)).collect();
        self.input = Some(input.clone());
        Tensor::from_vec(input.shape(), out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let x = self.input.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        upstream.expect_shape(x.shape(), "mish upstream")?;
        let dx = x
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &g)| g * mish_grad(x))
            .collect();
        Tensor::from_vec(x.shape(), dx)
    }
}

/// Pass-through layer.
#[derive(Debug, Clone, Default)]
pub struct Identity {
    shape: Option<Vec<usize>>,
}

impl<T: Scalar> Layer<T> for Identity {
    fn forward(&mut self, input: &Tensor<T>, _phase: Phase) -> NnResult<Tensor<T>> {
        self.shape = Some(input.shape().to_vec());
        Tensor::from_vec(input.shape(), input.data.clone())
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let shape = self.shape.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        upstream.expect_shape(shape, "identity upstream")?;
        Tensor::from_vec(shape, upstream.data.clone())
    }
}

/// Fully connected layer on `[N, in]` inputs; weight is `[out, in]`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let w = kaiming_uniform(in_features * out_features, in_features, rng);
        Self::from_weights(
            in_features,
            out_features,
            cast_vec(&w),
            vec![T::zero(); out_features],
        )
    }

    pub fn from_weights(in_features: usize, out_features: usize, weight: Vec<T>, bias: Vec<T>) -> Self {
        Self {
            in_features,
            out_features,
            weight: Tensor::param(&[out_features, in_features], weight),
            bias: Tensor::param(&[out_features], bias),
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&mut self, input: &Tensor<T>, _phase: Phase) -> NnResult<Tensor<T>> {
        input.expect_rank(2, "dense input")?;
        let n = input.shape()[0];
        if input.shape()[1] != self.in_features {
            return Err(NnError::ShapeMismatch(format!(
                "dense expects {} features, got {}",
                self.in_features,
                input.shape()[1]
            )));
        }
        let (i, o) = (self.in_features, self.out_features);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(&self.bias.data);
        }
        T::gemm(false, true, n, i, o, T::one(), &input.data, &self.weight.data, T::one(), &mut out);
        self.input = Some(input.clone());
        Tensor::from_vec(&[n, o], out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let x = self.input.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        let n = x.shape()[0];
        let (i, o) = (self.in_features, self.out_features);
        upstream.expect_shape(&[n, o], "dense upstream")?;
        T::gemm(true, false, o, n, i, T::one(), &upstream.data, &x.data, T::one(), self.weight.grad_mut());
        let gb = self.bias.grad_mut();
        for row in upstream.data.chunks(o) {
            gb.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
        }
        let mut dx = vec![T::zero(); n * i];
        T::gemm(false, false, n, o, i, T::one(), &upstream.data, &self.weight.data, T::zero(), &mut dx);
        Tensor::from_vec(&[n, i], dx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Row-wise softmax over the last dimension.
#[derive(Debug, Clone, Default)]
pub struct Softmax<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Softmax<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn apply(data: &[T], width: usize) -> Vec<T> {
        let mut out = data.to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        out
    }
}

impl<T: Scalar> Layer<T> for Softmax<T> {
    fn forward(&mut self, input: &Tensor<T>, _phase: Phase) -> NnResult<Tensor<T>> {
        let width = *input.shape().last().ok_or(NnError::EmptyInput)?;
        if width == 0 {
            return Err(NnError::EmptyInput);
        }
        let out = Tensor::from_vec(input.shape(), Self::apply(&input.data, width))?;
        self.output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let y = self.output.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        upstream.expect_shape(y.shape(), "softmax upstream")?;
        let width = *y.shape().last().unwrap();
        let mut dx = vec![T::zero(); y.len()];
        for ((d, yr), gr) in dx
            .chunks_mut(width)
            .zip(y.data.chunks(width))
            .zip(upstream.data.chunks(width))
        {
            let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
            for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                *dv = yv * (gv - dot);
            }
        }
        Tensor::from_vec(y.shape(), dx)
    }
}

/// Named layers applied in order.
pub struct Sequential<T> {
    layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Self { layers: Vec::new() }
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, name: &str, layer: impl Layer<T> + 'static) -> Self {
        self.layers.push((name.to_string(), Box::new(layer)));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, input: &Tensor<T>, phase: Phase) -> NnResult<Tensor<T>> {
        let mut x = input.clone();
        for (_, l) in &mut self.layers {
            x = l.forward(&x, phase)?;
        }
        Ok(x)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let mut g = upstream.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|(n, l)| scoped(n, l.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|(n, l)| scoped(n, l.named_params_mut()))
            .collect()
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|(n, l)| scoped(n, l.named_buffers()))
            .collect()
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|(n, l)| scoped(n, l.named_buffers_mut()))
            .collect()
    }
}
