use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, NnResult, Phase, Tensor};

/// Scalar objective the checker differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradLoss {
    /// `Σ r ⊙ y` for a fixed seeded random `r`.
    Projection,
    /// `½ Σ y²`.
    HalfSquare,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub seed: u64,
    pub loss: GradLoss,
    /// Checks at most this many randomly chosen coordinates per tensor.
    /// `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub check_input: bool,
    /// Lower bound on the relative-error denominator, so that gradients
    /// that are zero up to rounding do not dominate.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            seed: 0,
            loss: GradLoss::Projection,
            max_coords_per_tensor: None,
            check_input: true,
            denominator_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name and index of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

fn objective(y: &Tensor<f64>, loss: GradLoss, r: &[f64]) -> f64 {
    match loss {
        GradLoss::Projection => y.data.iter().zip(r).map(|(a, b)| a * b).sum(),
        GradLoss::HalfSquare => 0.5 * y.data.iter().map(|a| a * a).sum::<f64>(),
    }
}

fn pick(rng: &mut ChaCha8Rng, n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Compares analytic gradients against central differences
/// `(f(x+ε) − f(x−ε)) / 2ε` over parameters and (optionally) the input,
/// with the layer in training phase. Returns the worst relative error.
pub fn grad_check(
    layer: &mut dyn Layer<f64>,
    input: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> NnResult<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let y = layer.forward(input, Phase::Train)?;
    let r: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let upstream = match opts.loss {
        GradLoss::Projection => Tensor::from_vec(y.shape(), r.clone())?,
        GradLoss::HalfSquare => y.clone(),
    };
    layer.zero_grad();
    let dx = layer.backward(&upstream)?;
    let analytic: Vec<(String, Vec<f64>)> = layer
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone().unwrap_or_else(|| vec![0.0; p.len()])))
        .collect();

    let eps = opts.epsilon;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: &str, i: usize, a: f64, numeric: f64| {
        let denom = a.abs().max(numeric.abs()).max(opts.denominator_floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
        }
    };

    for (k, (name, grad)) in analytic.iter().enumerate() {
        for i in pick(&mut rng, grad.len(), opts.max_coords_per_tensor) {
            let eval = |delta: f64, layer: &mut dyn Layer<f64>| -> NnResult<f64> {
                let orig = {
                    let mut ps = layer.named_params_mut();
                    let p = &mut ps[k].1;
                    let orig = p.data[i];
                    p.data[i] = orig + delta;
                    orig
                };
                let out = layer.forward(input, Phase::Train);
                layer.named_params_mut()[k].1.data[i] = orig;
                Ok(objective(&out?, opts.loss, &r))
            };
            let plus = eval(eps, layer)?;
            let minus = eval(-eps, layer)?;
            record(name, i, grad[i], (plus - minus) / (2.0 * eps));
        }
    }

    if opts.check_input {
        for i in pick(&mut rng, input.len(), opts.max_coords_per_tensor) {
            let mut x = input.clone();
            x.data[i] += eps;
            let plus = objective(&layer.forward(&x, Phase::Train)?, opts.loss, &r);
            x.data[i] -= 2.0 * eps;
            let minus = objective(&layer.forward(&x, Phase::Train)?, opts.loss, &r);
            record("input", i, dx.data[i], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::{BatchNorm2d, Conv2d, Dense, Mish, Relu, Sequential, Softmax};
    use super::*;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dense::<f64>::new(5, 3, &mut rng);
        let opts = GradCheckOptions {
            loss: GradLoss::HalfSquare,
            ..Default::default()
        };
        let rep = grad_check(&mut d, &random_input(&[4, 5], 2), &opts).unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        assert_eq!(rep.checked, 15 + 3 + 20);
    }

    #[test]
    fn conv_bn_mish_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Sequential::new()
            .push("conv", Conv2d::<f64>::new(2, 3, (3, 3), (2, 1), (1, 1), true, &mut rng))
            .push("bn", BatchNorm2d::new(3))
            .push("act", Mish::new());
        let rep = grad_check(&mut net, &random_input(&[2, 2, 5, 4], 4), &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn relu_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Sequential::new()
            .push("fc", Dense::<f64>::new(4, 6, &mut rng))
            .push("relu", Relu::new())
            .push("fc2", Dense::<f64>::new(6, 3, &mut rng))
            .push("sm", Softmax::new());
        let rep = grad_check(&mut net, &random_input(&[3, 4], 5), &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn sampling_limits_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dense::<f64>::new(10, 10, &mut rng);
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(4),
            ..Default::default()
        };
        let rep = grad_check(&mut d, &random_input(&[2, 10], 2), &opts).unwrap();
        assert_eq!(rep.checked, 12);
    }
}
