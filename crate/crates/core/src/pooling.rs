//! Temporal pooling: maps `T × d` frame-level activations to a fixed-length
//! utterance vector.
//!
//! Normative definitions, per utterance with frames `h_t`:
//!
//! * **ST**: `[mean_t h_t, std_t h_t]`.
//! * **AT**: `score_t = vᵀ tanh(W h_t + b)`, `w = softmax(score)`, then the
//!   `w`-weighted mean and standard deviation.
//! * **MH**: frames split into `heads` sub-vectors of `d / heads` dims, each
//!   with its own AT parameters; output is `[mean_1, std_1, mean_2, std_2, …]`.
//! * **MRH**: MH evaluated once per softmax temperature `τ` (scores divided
//!   by `τ`), sharing parameters; outputs concatenated in resolution order.
//! * **LDE**: residuals `r_tc = h_t − μ_c`, soft assignments
//!   `w_tc = softmax_c(−s_c ‖r_tc‖²)`, encodings
//!   `e_c = Σ_t w_tc r_tc / (Σ_t w_tc + ε)`; output is `[e_1, …, e_C]`.
//!
//! Standard deviations are `sqrt(max(var, 0) + 1e-10)`. All five are
//! invariant to frame order.
//!
//! Arithmetic runs in `f64` regardless of the layer's element type.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::nn::{Layer, NnError, NnResult, Phase, Scalar, Tensor};

pub const VARIANCE_EPS: f64 = 1e-10;
pub const LDE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolingKind {
    St,
    At,
    Lde,
    Mh,
    Mrh,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 5] = [Self::St, Self::At, Self::Lde, Self::Mh, Self::Mrh];
}

impl FromStr for PoolingKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "st" => Ok(Self::St),
            "at" => Ok(Self::At),
            "lde" => Ok(Self::Lde),
            "mh" => Ok(Self::Mh),
            "mrh" => Ok(Self::Mrh),
            other => Err(NnError::InvalidConfig(format!("unknown pooling kind {other:?}"))),
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::St => "st",
            Self::At => "at",
            Self::Lde => "lde",
            Self::Mh => "mh",
            Self::Mrh => "mrh",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingConfig {
    pub kind: PoolingKind,
    pub input_dim: usize,
    pub heads: usize,
    pub dict_size: usize,
    pub attention_hidden: usize,
    pub resolutions: Vec<f64>,
}

impl PoolingConfig {
    pub fn new(kind: PoolingKind, input_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            heads: 4,
            dict_size: 8,
            attention_hidden: 32,
            resolutions: vec![0.5, 1.0, 2.0],
        }
    }

    /// Heads actually used: AT is a single head.
    pub fn effective_heads(&self) -> usize {
        match self.kind {
            PoolingKind::Mh | PoolingKind::Mrh => self.heads,
            _ => 1,
        }
    }

    fn temperatures(&self) -> Vec<f64> {
        match self.kind {
            PoolingKind::Mrh => self.resolutions.clone(),
            _ => vec![1.0],
        }
    }

    pub fn validate(&self) -> NnResult<()> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if self.input_dim == 0 {
            return bad("pooling input_dim must be positive".into());
        }
        match self.kind {
            PoolingKind::St => Ok(()),
            PoolingKind::At if self.attention_hidden == 0 => bad("attention_hidden must be positive".into()),
            PoolingKind::Mh | PoolingKind::Mrh
                if self.heads == 0 || self.input_dim % self.heads != 0 =>
            {
                bad(format!("input_dim {} not divisible by {} heads", self.input_dim, self.heads))
            }
            PoolingKind::Mh | PoolingKind::Mrh if self.attention_hidden == 0 => {
                bad("attention_hidden must be positive".into())
            }
            PoolingKind::Mrh if self.resolutions.is_empty() || self.resolutions.iter().any(|&r| !(r > 0.0)) => {
                bad("MRH needs at least one positive temperature".into())
            }
            PoolingKind::Lde if self.dict_size == 0 => bad("dict_size must be at least 1".into()),
            _ => Ok(()),
        }
    }

    pub fn output_dim(&self) -> usize {
        let d = self.input_dim;
        match self.kind {
            PoolingKind::St | PoolingKind::At | PoolingKind::Mh => 2 * d,
            PoolingKind::Mrh => 2 * d * self.resolutions.len(),
            PoolingKind::Lde => self.dict_size * d,
        }
    }
}

/// Utterance-level vector with the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    pub values: Vec<f64>,
    pub provenance: PoolingConfig,
}

/// One head's attention parameters, viewed as `f64`.
struct HeadParams<'a> {
    w: &'a [f64],
    b: &'a [f64],
    v: &'a [f64],
    hidden: usize,
}

/// Weighted first and second moments of `x` (`t × dh`, row-major).
fn weighted_stats(x: &[f64], dh: usize, weights: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dh];
    for (row, &w) in x.chunks(dh).zip(weights) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += w * v;
        }
    }
    let mut var = vec![0.0; dh];
    for (row, &w) in x.chunks(dh).zip(weights) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += w * (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|&s| (s.max(0.0) + VARIANCE_EPS).sqrt()).collect();
    (mean, var, std)
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Attention scores `vᵀ tanh(W x_t + b) / τ` and the hidden activations.
fn head_scores(x: &[f64], dh: usize, p: &HeadParams<'_>, tau: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut scores = Vec::new();
    let mut hidden = Vec::new();
    for row in x.chunks(dh) {
        let g: Vec<f64> = (0..p.hidden)
            .map(|j| {
                let wrow = &p.w[j * dh..(j + 1) * dh];
                (p.b[j] + wrow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()).tanh()
            })
            .collect();
        scores.push(g.iter().zip(p.v).map(|(a, b)| a * b).sum::<f64>() / tau);
        hidden.push(g);
    }
    (scores, hidden)
}

/// Backward through the weighted mean/std given their upstream gradients.
/// Returns `(dx, dweights)`.
fn weighted_stats_backward(
    x: &[f64],
    dh: usize,
    weights: &[f64],
    mean: &[f64],
    var: &[f64],
    std: &[f64],
    d_mean: &[f64],
    d_std: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    // d std / d var vanishes where the clamp is active
    let d_var: Vec<f64> = (0..dh)
        .map(|k| if var[k] > 0.0 { d_std[k] / (2.0 * std[k]) } else { 0.0 })
        .collect();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weights.len()];
    for (t, (row, &w)) in x.chunks(dh).zip(weights).enumerate() {
        let mut acc = 0.0;
        for k in 0..dh {
            let c = row[k] - mean[k];
            dx[t * dh + k] = w * d_mean[k] + 2.0 * w * c * d_var[k];
            acc += row[k] * d_mean[k] + c * c * d_var[k];
        }
        dw[t] = acc;
    }
    (dx, dw)
}

fn softmax_backward(w: &[f64], dw: &[f64]) -> Vec<f64> {
    let dot: f64 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
    w.iter().zip(dw).map(|(a, b)| a * (b - dot)).collect()
}

#[derive(Debug, Clone)]
struct PoolCache {
    n: usize,
    t: usize,
    input: Vec<f64>,
}

/// A pooling layer over `[N, T, d]` batches producing `[N, P]`.
#[derive(Debug, Clone)]
pub struct Pooling<T> {
    pub config: PoolingConfig,
    /// AT/MH/MRH: `[heads, hidden, d/heads]`; LDE: centers `[C, d]`.
    pub primary: Option<Tensor<T>>,
    /// AT/MH/MRH: biases `[heads, hidden]`; LDE: scales `[C]`.
    pub secondary: Option<Tensor<T>>,
    /// AT/MH/MRH: score vectors `[heads, hidden]`.
    pub score: Option<Tensor<T>>,
    cache: Option<PoolCache>,
}

impl<T: Scalar> Pooling<T> {
    pub fn new<R: Rng + ?Sized>(config: PoolingConfig, rng: &mut R) -> NnResult<Self> {
        config.validate()?;
        let d = config.input_dim;
        let (primary, secondary, score) = match config.kind {
            PoolingKind::St => (None, None, None),
            PoolingKind::At | PoolingKind::Mh | PoolingKind::Mrh => {
                let h = config.effective_heads();
                let a = config.attention_hidden;
                let dh = d / h;
                let bw = (6.0 / (a + dh) as f64).sqrt();
                let bv = (6.0 / (a + 1) as f64).sqrt();
                let w: Vec<T> = (0..h * a * dh).map(|_| T::lit(rng.gen_range(-bw..bw))).collect();
                let v: Vec<T> = (0..h * a).map(|_| T::lit(rng.gen_range(-bv..bv))).collect();
                (
                    Some(Tensor::param(&[h, a, dh], w)),
                    Some(Tensor::param(&[h, a], vec![T::zero(); h * a])),
                    Some(Tensor::param(&[h, a], v)),
                )
            }
            PoolingKind::Lde => {
                let c = config.dict_size;
                let mu: Vec<T> = (0..c * d).map(|_| T::lit(rng.gen_range(-0.5..0.5))).collect();
                (
                    Some(Tensor::param(&[c, d], mu)),
                    Some(Tensor::param(&[c], vec![T::one(); c])),
                    None,
                )
            }
        };
        Ok(Self {
            config,
            primary,
            secondary,
            score,
            cache: None,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn f64s(t: &Option<Tensor<T>>) -> Vec<f64> {
        t.as_ref().map(|t| t.to_f64_vec()).unwrap_or_default()
    }

    /// Pools one utterance given as `t × d` row-major frames.
    pub fn pool_frames(&self, frames: &[f64], t: usize) -> NnResult<PooledVector> {
        let d = self.config.input_dim;
        if t == 0 {
            return Err(NnError::EmptyInput);
        }
        if frames.len() != t * d {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for {t} frames of dim {d}",
                frames.len()
            )));
        }
        Ok(PooledVector {
            values: self.forward_one(frames, t),
            provenance: self.config.clone(),
        })
    }

    /// Attention weights per (temperature, head), each over the `t` frames.
    /// Empty for ST and LDE.
    pub fn attention_weights(&self, frames: &[f64], t: usize) -> Vec<Vec<f64>> {
        if !matches!(self.config.kind, PoolingKind::At | PoolingKind::Mh | PoolingKind::Mrh) {
            return Vec::new();
        }
        let (w, b, v) = (Self::f64s(&self.primary), Self::f64s(&self.secondary), Self::f64s(&self.score));
        let h = self.config.effective_heads();
        let dh = self.config.input_dim / h;
        let a = self.config.attention_hidden;
        let mut out = Vec::new();
        for tau in self.config.temperatures() {
            for k in 0..h {
                let x = head_slice(frames, t, self.config.input_dim, k, dh);
                let p = HeadParams {
                    w: &w[k * a * dh..(k + 1) * a * dh],
                    b: &b[k * a..(k + 1) * a],
                    v: &v[k * a..(k + 1) * a],
                    hidden: a,
                };
                out.push(softmax(&head_scores(&x, dh, &p, tau).0));
            }
        }
        out
    }

    /// LDE soft-assignment weights, `t` rows of `C` values.
    pub fn assignment_weights(&self, frames: &[f64], t: usize) -> Vec<Vec<f64>> {
        if self.config.kind != PoolingKind::Lde {
            return Vec::new();
        }
        let (mu, s) = (Self::f64s(&self.primary), Self::f64s(&self.secondary));
        let d = self.config.input_dim;
        frames
            .chunks(d)
            .take(t)
            .map(|row| softmax(&lde_logits(row, &mu, &s, d)))
            .collect()
    }

    fn forward_one(&self, x: &[f64], t: usize) -> Vec<f64> {
        let d = self.config.input_dim;
        match self.config.kind {
            PoolingKind::St => {
                let w = vec![1.0 / t as f64; t];
                let (m, _, s) = weighted_stats(x, d, &w);
                [m, s].concat()
            }
            PoolingKind::Lde => {
                let (mu, s) = (Self::f64s(&self.primary), Self::f64s(&self.secondary));
                let c = self.config.dict_size;
                let mut num = vec![0.0; c * d];
                let mut den = vec![0.0; c];
                for row in x.chunks(d) {
                    let w = softmax(&lde_logits(row, &mu, &s, d));
                    for ci in 0..c {
                        den[ci] += w[ci];
                        for k in 0..d {
                            num[ci * d + k] += w[ci] * (row[k] - mu[ci * d + k]);
                        }
                    }
                }
                (0..c * d).map(|i| num[i] / (den[i / d] + LDE_EPS)).collect()
            }
            PoolingKind::At | PoolingKind::Mh | PoolingKind::Mrh => {
                let (w, b, v) = (Self::f64s(&self.primary), Self::f64s(&self.secondary), Self::f64s(&self.score));
                let h = self.config.effective_heads();
                let dh = d / h;
                let a = self.config.attention_hidden;
                let mut out = Vec::with_capacity(self.output_dim());
                for tau in self.config.temperatures() {
                    for k in 0..h {
                        let xs = head_slice(x, t, d, k, dh);
                        let p = HeadParams {
                            w: &w[k * a * dh..(k + 1) * a * dh],
                            b: &b[k * a..(k + 1) * a],
                            v: &v[k * a..(k + 1) * a],
                            hidden: a,
                        };
                        let weights = softmax(&head_scores(&xs, dh, &p, tau).0);
                        let (m, _, s) = weighted_stats(&xs, dh, &weights);
                        out.extend(m);
                        out.extend(s);
                    }
                }
                out
            }
        }
    }

    /// Returns `dx` for one utterance and accumulates parameter gradients
    /// into the supplied `f64` buffers (same layout as the parameters).
    fn backward_one(&self, x: &[f64], t: usize, up: &[f64], grads: &mut [Vec<f64>; 3]) -> Vec<f64> {
        let d = self.config.input_dim;
        match self.config.kind {
            PoolingKind::St => {
                let w = vec![1.0 / t as f64; t];
                let (m, var, s) = weighted_stats(x, d, &w);
                weighted_stats_backward(x, d, &w, &m, &var, &s, &up[..d], &up[d..]).0
            }
            PoolingKind::Lde => self.lde_backward(x, up, grads),
            PoolingKind::At | PoolingKind::Mh | PoolingKind::Mrh => {
                let (w, b, v) = (Self::f64s(&self.primary), Self::f64s(&self.secondary), Self::f64s(&self.score));
                let h = self.config.effective_heads();
                let dh = d / h;
                let a = self.config.attention_hidden;
                let mut dx = vec![0.0; t * d];
                let mut offset = 0;
                for tau in self.config.temperatures() {
                    for k in 0..h {
                        let xs = head_slice(x, t, d, k, dh);
                        let p = HeadParams {
                            w: &w[k * a * dh..(k + 1) * a * dh],
                            b: &b[k * a..(k + 1) * a],
                            v: &v[k * a..(k + 1) * a],
                            hidden: a,
                        };
                        let (scores, hidden) = head_scores(&xs, dh, &p, tau);
                        let weights = softmax(&scores);
                        let (m, var, s) = weighted_stats(&xs, dh, &weights);
                        let d_mean = &up[offset..offset + dh];
                        let d_std = &up[offset + dh..offset + 2 * dh];
                        offset += 2 * dh;
                        let (mut dxs, dweights) =
                            weighted_stats_backward(&xs, dh, &weights, &m, &var, &s, d_mean, d_std);
                        let dscore: Vec<f64> =
                            softmax_backward(&weights, &dweights).iter().map(|g| g / tau).collect();
                        let [gw, gb, gv] = grads;
                        for (ti, (row, g)) in xs.chunks(dh).zip(&hidden).enumerate() {
                            for j in 0..a {
                                gv[k * a + j] += dscore[ti] * g[j];
                                let du = dscore[ti] * p.v[j] * (1.0 - g[j] * g[j]);
                                gb[k * a + j] += du;
                                let wrow = &p.w[j * dh..(j + 1) * dh];
                                for q in 0..dh {
                                    gw[(k * a + j) * dh + q] += du * row[q];
                                    dxs[ti * dh + q] += du * wrow[q];
                                }
                            }
                        }
                        for ti in 0..t {
                            for q in 0..dh {
                                dx[ti * d + k * dh + q] += dxs[ti * dh + q];
                            }
                        }
                    }
                }
                dx
            }
        }
    }

    fn lde_backward(&self, x: &[f64], up: &[f64], grads: &mut [Vec<f64>; 3]) -> Vec<f64> {
        let d = self.config.input_dim;
        let c = self.config.dict_size;
        let (mu, s) = (Self::f64s(&self.primary), Self::f64s(&self.secondary));
        let assign: Vec<Vec<f64>> = x.chunks(d).map(|row| softmax(&lde_logits(row, &mu, &s, d))).collect();
        let mut num = vec![0.0; c * d];
        let mut den = vec![LDE_EPS; c];
        for (row, w) in x.chunks(d).zip(&assign) {
            for ci in 0..c {
                den[ci] += w[ci];
                for k in 0..d {
                    num[ci * d + k] += w[ci] * (row[k] - mu[ci * d + k]);
                }
            }
        }
        // e = num / den
        let d_num: Vec<f64> = (0..c * d).map(|i| up[i] / den[i / d]).collect();
        let d_den: Vec<f64> = (0..c)
            .map(|ci| -(0..d).map(|k| up[ci * d + k] * num[ci * d + k]).sum::<f64>() / (den[ci] * den[ci]))
            .collect();
        let [gmu, gs, _] = grads;
        let mut dx = vec![0.0; x.len()];
        for (ti, (row, w)) in x.chunks(d).zip(&assign).enumerate() {
            let dw: Vec<f64> = (0..c)
                .map(|ci| {
                    d_den[ci]
                        + (0..d)
                            .map(|k| (row[k] - mu[ci * d + k]) * d_num[ci * d + k])
                            .sum::<f64>()
                })
                .collect();
            let dlogit = softmax_backward(w, &dw);
            for ci in 0..c {
                let dist: f64 = (0..d).map(|k| (row[k] - mu[ci * d + k]).powi(2)).sum();
                gs[ci] -= dlogit[ci] * dist;
                let d_dist = -s[ci] * dlogit[ci];
                for k in 0..d {
                    let r = row[k] - mu[ci * d + k];
                    let dr = w[ci] * d_num[ci * d + k] + 2.0 * r * d_dist;
                    dx[ti * d + k] += dr;
                    gmu[ci * d + k] -= dr;
                }
            }
        }
        dx
    }

    fn param_slots(&mut self) -> [Option<&mut Tensor<T>>; 3] {
        [self.primary.as_mut(), self.secondary.as_mut(), self.score.as_mut()]
    }
}

fn lde_logits(row: &[f64], mu: &[f64], s: &[f64], d: usize) -> Vec<f64> {
    s.iter()
        .enumerate()
        .map(|(ci, sc)| {
            let dist: f64 = row.iter().zip(&mu[ci * d..(ci + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
            -sc * dist
        })
        .collect()
}

/// Columns `[k·dh, (k+1)·dh)` of a `t × d` matrix.
fn head_slice(x: &[f64], t: usize, d: usize, k: usize, dh: usize) -> Vec<f64> {
    if dh == d {
        return x[..t * d].to_vec();
    }
    x.chunks(d).take(t).flat_map(|row| row[k * dh..(k + 1) * dh].iter().copied()).collect()
}

impl<T: Scalar> Layer<T> for Pooling<T> {
    fn forward(&mut self, input: &Tensor<T>, _phase: Phase) -> NnResult<Tensor<T>> {
        input.expect_rank(3, "pooling input")?;
        let s = input.shape();
        let (n, t, d) = (s[0], s[1], s[2]);
        if d != self.config.input_dim {
            return Err(NnError::ShapeMismatch(format!(
                "pooling expects dim {}, got {d}",
                self.config.input_dim
            )));
        }
        if t == 0 {
            return Err(NnError::EmptyInput);
        }
        let x = input.to_f64_vec();
        let p = self.output_dim();
        let mut out = Vec::with_capacity(n * p);
        for b in 0..n {
            out.extend(self.forward_one(&x[b * t * d..(b + 1) * t * d], t).into_iter().map(T::lit));
        }
        self.cache = Some(PoolCache { n, t, input: x });
        Tensor::from_vec(&[n, p], out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        let (n, t, d) = (cache.n, cache.t, self.config.input_dim);
        let p = self.output_dim();
        upstream.expect_shape(&[n, p], "pooling upstream")?;
        let up = upstream.to_f64_vec();
        let sizes = [&self.primary, &self.secondary, &self.score].map(|t| t.as_ref().map_or(0, |t| t.len()));
        let mut grads = sizes.map(|n| vec![0.0; n]);
        let mut dx = Vec::with_capacity(n * t * d);
        for b in 0..n {
            let g = self.backward_one(&cache.input[b * t * d..(b + 1) * t * d], t, &up[b * p..(b + 1) * p], &mut grads);
            dx.extend(g.into_iter().map(T::lit));
        }
        for (slot, g) in self.param_slots().into_iter().zip(&grads) {
            if let Some(param) = slot {
                param.grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a += T::lit(*b));
            }
        }
        Tensor::from_vec(&[n, t, d], dx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let names = self.param_names();
        [&self.primary, &self.secondary, &self.score]
            .into_iter()
            .zip(names)
            .filter_map(|(t, n)| t.as_ref().map(|t| (n.to_string(), t)))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names = self.param_names();
        self.param_slots()
            .into_iter()
            .zip(names)
            .filter_map(|(t, n)| t.map(|t| (n.to_string(), t)))
            .collect()
    }
}

impl<T> Pooling<T> {
    fn param_names(&self) -> [&'static str; 3] {
        match self.config.kind {
            PoolingKind::Lde => ["centers", "scales", "unused"],
            _ => ["attn_w", "attn_b", "attn_v"],
        }
    }
}
