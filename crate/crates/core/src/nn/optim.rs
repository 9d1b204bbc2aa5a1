use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd_momentum() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-5,
            ..Self::sgd_momentum()
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd_momentum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot<F> {
    m: Vec<F>,
    v: Vec<F>,
    steps: u32,
    // β₁ᵗ and β₂ᵗ as running products; `powi` rounds differently across builds
    b1_pow: f64,
    b2_pow: f64,
}

/// Stateful optimizer; state is keyed by parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<F> {
    pub config: OptimizerConfig,
    state: BTreeMap<String, Slot<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// Updates every unfrozen entry from its accumulated gradient.
    ///
    /// Momentum SGD keeps `buf ← μ·buf + g` and applies `θ ← θ − η·buf`;
    /// Adam uses bias-corrected first and second moments.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        let c = self.config;
        let lr = F::of(c.lr);
        let wd = F::of(c.weight_decay);
        for (path, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let n = p.tensor.numel();
            let grad: Vec<F> = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => {
                    return Err(Error::contract(format!(
                        "no gradient for unfrozen parameter {path}"
                    )))
                }
            };
            let slot = self.state.entry(path.to_string()).or_insert_with(|| Slot {
                m: vec![F::zero(); n],
                v: vec![F::zero(); n],
                steps: 0,
                b1_pow: 1.0,
                b2_pow: 1.0,
            });
            slot.steps += 1;
            slot.b1_pow *= c.beta1;
            slot.b2_pow *= c.beta2;
            let data = p.tensor.data_mut();
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = F::of(c.momentum);
                    for i in 0..n {
                        let g = grad[i] + wd * data[i];
                        let buf = if slot.steps == 1 { g } else { mu * slot.m[i] + g };
                        slot.m[i] = buf;
                        data[i] -= lr * buf;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
                    let bc1 = F::of(1.0 - slot.b1_pow);
                    let bc2 = F::of(1.0 - slot.b2_pow);
                    let eps = F::of(c.eps);
                    for i in 0..n {
                        let g = grad[i] + wd * data[i];
                        slot.m[i] = b1 * slot.m[i] + (F::one() - b1) * g;
                        slot.v[i] = b2 * slot.v[i] + (F::one() - b2) * g * g;
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(theta: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("m/fc0/weight", Tensor::new(vec![1], vec![theta]).unwrap())
            .unwrap();
        s.tensor_mut("m/fc0/weight").unwrap().accumulate_grad(&[grad]).unwrap();
        s
    }

    fn value(s: &ParamStore<f64>) -> f64 {
        s.tensor("m/fc0/weight").unwrap().data()[0]
    }

    #[test]
    fn defaults() {
        let s = OptimizerConfig::sgd_momentum();
        assert_eq!((s.lr, s.momentum, s.weight_decay), (0.005, 0.9, 0.0));
        assert_eq!(OptimizerConfig::adam().lr, 1e-5);
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = store(1.0, 2.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd_momentum().with_lr(0.1).with_momentum(0.0));
        opt.step(&mut s).unwrap();
        assert!((value(&s) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn frozen_param_unchanged() {
        let mut s = store(1.0, 2.0);
        s.set_frozen("m/fc0/weight", true).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::sgd_momentum());
        opt.step(&mut s).unwrap();
        assert_eq!(value(&s).to_bits(), 1.0f64.to_bits());
    }

    #[test]
    fn momentum_second_step() {
        let (eta, mu, g) = (0.05, 0.9, 1.5);
        let mut s = store(0.0, g);
        let mut opt = Optimizer::new(OptimizerConfig::sgd_momentum().with_lr(eta).with_momentum(mu));
        opt.step(&mut s).unwrap();
        let after_one = value(&s);
        opt.step(&mut s).unwrap();
        let delta2 = after_one - value(&s);
        assert!((delta2 - eta * g * (1.0 + mu)).abs() < 1e-14);
    }

    #[test]
    fn vanilla_descent_three_steps() {
        // f(θ) = θ², grad 2θ, η = 0.1: θ_{k+1} = 0.8 θ_k
        let mut s = store(1.0, 0.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd_momentum().with_lr(0.1).with_momentum(0.0));
        let mut expect = 1.0;
        for _ in 0..3 {
            let t = s.tensor_mut("m/fc0/weight").unwrap();
            let th = t.data()[0];
            t.zero_grad();
            t.accumulate_grad(&[2.0 * th]).unwrap();
            opt.step(&mut s).unwrap();
            expect *= 0.8;
            assert!((value(&s) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut s = ParamStore::<f64>::new();
        s.insert("m/fc0/bias", Tensor::zeros(vec![3])).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adam());
        assert!(matches!(opt.step(&mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store(1.0, 3.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam().with_lr(0.01));
        opt.step(&mut s).unwrap();
        assert!((value(&s) - 0.99).abs() < 1e-9);
    }
}
