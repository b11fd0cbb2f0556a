//! Adam and SGD-with-momentum with decoupled weight decay.
//!
//! Weight decay is added to the update direction, not to the gradient that
//! feeds the moment estimates:
//!
//! * Adam: `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`
//! * SGD: `buf ← μ·buf + g`, `θ ← θ − lr·(buf + wd·θ)`

use serde::{Deserialize, Serialize};

use crate::error::{MudaError, Result};
use crate::ndcore::{Parameter, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: SGD_MOMENTUM }
    }
}

/// Optimizer over one parameter scope. Moment buffers are created on the
/// first step and must match the parameters on every later step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    /// First moment (Adam) or momentum buffer (SGD), per parameter.
    first: Vec<Tensor>,
    /// Second moment (Adam only).
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(MudaError::config(
                "lr",
                format!("learning rate must be positive, got {lr}"),
            ));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(MudaError::config(
                "weight_decay",
                format!("must be non-negative, got {weight_decay}"),
            ));
        }
        match kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                    return Err(MudaError::config("optimizer", "adam needs betas in [0,1) and eps > 0"));
                }
            }
            OptimizerKind::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(MudaError::config("optimizer.momentum", "momentum must be in [0,1)"));
                }
            }
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if self.step_count == 0 {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if params.len() != self.first.len() {
            return Err(MudaError::State(format!(
                "optimizer holds {} buffers but was given {} parameters",
                self.first.len(),
                params.len()
            )));
        }
        for (p, buf) in params.iter().zip(&self.first) {
            p.value.ensure_same_shape(buf, "optimizer buffer")?;
            p.grad.ensure_same_shape(&p.value, "parameter gradient")?;
            if !p.grad.is_finite() {
                return Err(MudaError::State(format!("gradient of `{}` is not finite", p.name)));
            }
        }
        self.step_count += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let Parameter { value, grad, .. } = &mut **p;
                    for (((w, &g), m), v) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for (p, buf) in params.iter_mut().zip(&mut self.first) {
                    let Parameter { value, grad, .. } = &mut **p;
                    for ((w, &g), b) in value.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
                        *b = momentum * *b + g;
                        *w -= lr * (*b + wd * *w);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn zero_grad(params: &mut [&mut Parameter]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grads: &[f64]) -> Parameter {
        let mut p = Parameter::new("p", Tensor::row(values));
        p.grad = Tensor::row(grads);
        p
    }

    #[test]
    fn adam_first_step() {
        let mut p = param(&[0.0], &[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.001, 0.0).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p.value.data()[0] - expected).abs() < 1e-18);
        assert!((p.value.data()[0] + 0.000999999990).abs() < 1e-14);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        for kind in [OptimizerKind::adam(), OptimizerKind::sgd()] {
            let mut p = param(&[1.5, -2.0], &[0.0, 0.0]);
            let mut opt = Optimizer::new(kind, 0.1, 0.0).unwrap();
            for _ in 0..5 {
                opt.step(&mut [&mut p]).unwrap();
            }
            assert_eq!(p.value.data(), &[1.5, -2.0]);
        }
    }

    #[test]
    fn plain_sgd() {
        let mut p = param(&[1.0, 2.0], &[0.5, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, 0.0).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1]);
    }

    #[test]
    fn weight_decay_shrinks_norm_monotonically() {
        for kind in [OptimizerKind::adam(), OptimizerKind::sgd()] {
            let mut p = param(&[3.0, -4.0], &[0.0, 0.0]);
            let mut opt = Optimizer::new(kind, 0.05, 0.1).unwrap();
            let mut last = p.value.norm_sq();
            for _ in 0..20 {
                opt.step(&mut [&mut p]).unwrap();
                let now = p.value.norm_sq();
                assert!(now < last);
                last = now;
            }
        }
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let mut a = param(&[1.0], &[1.0]);
        let mut b = param(&[1.0], &[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1, 0.0).unwrap();
        opt.step(&mut [&mut a]).unwrap();
        assert!(matches!(opt.step(&mut [&mut a, &mut b]), Err(MudaError::State(_))));
        let mut nan = param(&[1.0], &[f64::NAN]);
        let mut fresh = Optimizer::new(OptimizerKind::adam(), 0.1, 0.0).unwrap();
        assert!(fresh.step(&mut [&mut nan]).is_err());
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(Optimizer::new(OptimizerKind::adam(), 0.0, 0.0).is_err());
        assert!(Optimizer::new(OptimizerKind::adam(), 0.1, -1.0).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd { momentum: 1.0 }, 0.1, 0.0).is_err());
    }

    #[test]
    fn zero_grad_is_idempotent() {
        let mut p = param(&[1.0, 2.0], &[3.0, 4.0]);
        zero_grad(&mut [&mut p]);
        assert_eq!(p.grad.data(), &[0.0, 0.0]);
        zero_grad(&mut [&mut p]);
        assert_eq!(p.grad.shape(), &[1, 2]);
        assert_eq!(p.grad.data(), &[0.0, 0.0]);
    }
}
