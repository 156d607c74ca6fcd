use std::collections::BTreeMap;

use super::{NnError, NnResult, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub beta1: f64,
    /// Adam's second-moment decay; unused by SGD.
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to every gradient.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            beta1: momentum,
            beta2: 0.0,
            eps: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> NnResult<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(NnError::InvalidConfig(format!(
                "learning rate must be > 0 and weight decay >= 0, got {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NnError::InvalidConfig(format!("betas must lie in [0, 1): {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// SGD-with-momentum or Adam, with per-parameter state keyed by name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    steps: u64,
    state: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update using each parameter's accumulated gradient.
    pub fn step<T: Scalar>(&mut self, params: Vec<(String, &mut Tensor<T>)>) -> NnResult<()> {
        self.steps += 1;
        let cfg = self.config;
        let t = self.steps as i32;
        for (name, p) in params {
            let n = p.len();
            let grad = match &p.grad {
                Some(g) if g.len() == n => g.clone(),
                Some(g) => {
                    return Err(NnError::ShapeMismatch(format!(
                        "{name}: gradient has {} entries, parameter {n}",
                        g.len()
                    )))
                }
                None => continue,
            };
            let slot = self.state.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if slot.m.len() != n {
                return Err(NnError::ShapeMismatch(format!("{name}: optimizer state size changed")));
            }
            for i in 0..n {
                let w = p.data[i].as_f64();
                let g = grad[i].as_f64() + cfg.weight_decay * w;
                let updated = match cfg.kind {
                    OptimizerKind::SgdMomentum => {
                        slot.m[i] = cfg.beta1 * slot.m[i] + g;
                        w - cfg.learning_rate * slot.m[i]
                    }
                    OptimizerKind::Adam => {
                        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
                        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
                        let mh = slot.m[i] / (1.0 - cfg.beta1.powi(t));
                        let vh = slot.v[i] / (1.0 - cfg.beta2.powi(t));
                        w - cfg.learning_rate * mh / (vh.sqrt() + cfg.eps)
                    }
                };
                p.data[i] = T::lit(updated);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::param(&[1], vec![w]);
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = scalar(0.7, 0.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9));
        opt.step(vec![("w".into(), &mut p)]).unwrap();
        assert_eq!(p.data, vec![0.7]);
    }

    #[test]
    fn sgd_single_step() {
        let mut p = scalar(1.0, 1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0));
        opt.step(vec![("w".into(), &mut p)]).unwrap();
        assert!((p.data[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_square() {
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg);
        let mut p = scalar(1.0, 0.0);
        for _ in 0..200 {
            let w = p.data[0];
            p.grad = Some(vec![2.0 * w]);
            opt.step(vec![("w".into(), &mut p)]).unwrap();
        }
        assert!(p.data[0].abs() < 0.05, "{}", p.data[0]);
    }

    #[test]
    fn state_shape_checked() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let mut p = scalar(1.0, 1.0);
        opt.step(vec![("w".into(), &mut p)]).unwrap();
        let mut q = Tensor::<f64>::param(&[2], vec![0.0, 0.0]);
        assert!(opt.step(vec![("w".into(), &mut q)]).is_err());
        let mut bad = Tensor::<f64>::param(&[2], vec![0.0, 0.0]);
        bad.grad = Some(vec![0.0]);
        assert!(opt.step(vec![("b".into(), &mut bad)]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
