//! Layer primitives with explicit forward and backward passes.
//!
//! Forward passes take `&self` and return a [`LayerCache`] holding whatever
//! the backward pass needs, so several passes (e.g. MC-dropout samples) can
//! share one set of parameters while each keeps its own intermediates.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{MudaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics in batch norm; caches usable by backward.
    Train,
    /// Running statistics in batch norm, treated as constants by backward.
    Eval,
}

/// Per-pass settings shared by every layer of one forward pass.
pub struct PassContext<'a> {
    pub mode: Mode,
    pub dropout_active: bool,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Relu,
    BatchNorm,
    Dropout,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[D_in × D_out]`
    pub weight: Parameter,
    /// `[1 × D_out]`
    pub bias: Parameter,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        weight.ensure_matrix("dense weight")?;
        if bias.len() != weight.cols() {
            return Err(MudaError::Shape {
                context: "dense bias vs weight",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let bias = bias.reshape(vec![1, weight.cols()])?;
        Ok(Dense {
            weight: Parameter::new("weight", weight),
            bias: Parameter::new("bias", bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    /// `out = x·W + b`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        if x.ndim() != 2 || x.cols() != self.in_dim() {
            return Err(MudaError::Shape {
                context: "dense input vs weight",
                left: x.shape().to_vec(),
                right: self.weight.value.shape().to_vec(),
            });
        }
        let out = x.matmul(&self.weight.value)?.add_row_broadcast(&self.bias.value)?;
        Ok((out, LayerCache::Dense { input: x.clone() }))
    }

    fn backward(&self, input: &Tensor, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let dw = input.t_matmul(grad)?;
        let db = grad.sum_rows();
        let dx = grad.matmul_t(&self.weight.value)?;
        Ok((dx, vec![dw, db]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) || eps <= 0.0 {
            return Err(MudaError::config(
                "batch_norm",
                format!("momentum must be in [0,1] and eps > 0 (got {momentum}, {eps})"),
            ));
        }
        Ok(BatchNorm {
            gamma: Parameter::new("gamma", Tensor::filled(&[1, dim], 1.0)),
            beta: Parameter::new("beta", Tensor::zeros(&[1, dim])),
            running_mean: Tensor::zeros(&[1, dim]),
            running_var: Tensor::filled(&[1, dim], 1.0),
            momentum,
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        let d = self.dim();
        if x.ndim() != 2 || x.cols() != d {
            return Err(MudaError::Shape {
                context: "batch norm input vs features",
                left: x.shape().to_vec(),
                right: vec![d],
            });
        }
        let n = x.rows();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; d];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(x.row_slice(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(x.row_slice(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        for r in 0..n {
            for (k, v) in xhat.row_slice_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[k]) * inv_std[k];
            }
        }
        let mut out = xhat.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for r in 0..n {
            for (k, v) in out.row_slice_mut(r).iter_mut().enumerate() {
                *v = *v * g[k] + b[k];
            }
        }
        let cache = match mode {
            Mode::Train => LayerCache::BatchNorm {
                xhat,
                inv_std,
                batch_stats: Some(BatchStats { mean, var, count: n }),
            },
            Mode::Eval => LayerCache::BatchNorm {
                xhat,
                inv_std,
                batch_stats: None,
            },
        };
        Ok((out, cache))
    }

    fn backward(
        &self,
        xhat: &Tensor,
        inv_std: &[f64],
        batch_stats: bool,
        grad: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        grad.ensure_same_shape(xhat, "batch norm backward")?;
        let (n, d) = (grad.rows(), grad.cols());
        let gamma = self.gamma.value.data();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for r in 0..n {
            for k in 0..d {
                let g = grad.get2(r, k);
                dgamma[k] += g * xhat.get2(r, k);
                dbeta[k] += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, d]);
        if batch_stats {
            // dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), dxhat = g·γ
            let nf = n as f64;
            for r in 0..n {
                let row = dx.row_slice_mut(r);
                for k in 0..d {
                    let dxhat = grad.get2(r, k) * gamma[k];
                    let sum_dxhat = dbeta[k] * gamma[k];
                    let sum_dxhat_xhat = dgamma[k] * gamma[k];
                    row[k] = inv_std[k] / nf * (nf * dxhat - sum_dxhat - xhat.get2(r, k) * sum_dxhat_xhat);
                }
            }
        } else {
            for r in 0..n {
                let row = dx.row_slice_mut(r);
                for k in 0..d {
                    row[k] = grad.get2(r, k) * gamma[k] * inv_std[k];
                }
            }
        }
        Ok((
            dx,
            vec![Tensor::new(vec![1, d], dgamma)?, Tensor::new(vec![1, d], dbeta)?],
        ))
    }

    /// Exponential moving update of the running statistics from one training batch.
    /// The variance is stored unbiased (N−1 denominator) when N > 1.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        validate_rate(rate)?;
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn set_rate(&mut self, rate: f64) -> Result<()> {
        validate_rate(rate)?;
        self.rate = rate;
        Ok(())
    }

    /// Inverted dropout: kept units are scaled by `1/(1−ρ)`. Inactive dropout
    /// returns the input unchanged and draws nothing from `rng`.
    pub fn forward(&self, x: &Tensor, active: bool, rng: &mut dyn RngCore) -> (Tensor, LayerCache) {
        if !active {
            return (x.clone(), LayerCache::Dropout { mask: None });
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask = x.map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 });
        let out = x.zip_map(&mask, |a, m| a * m).expect("mask built from x");
        (out, LayerCache::Dropout { mask: Some(mask) })
    }
}

pub fn validate_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(MudaError::config(
            "dropout.rate",
            format!("dropout rate must lie in [0, 1), got {rate}"),
        ));
    }
    Ok(())
}

pub fn relu_forward(x: &Tensor) -> (Tensor, LayerCache) {
    (x.map(|v| v.max(0.0)), LayerCache::Relu { input: x.clone() })
}

pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    input.zip_map(grad, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_forward(x: &Tensor) -> Result<Tensor> {
    x.ensure_matrix("softmax input")?;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_slice_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax: `dx = y ⊙ (g − ⟨y, g⟩)` per row.
pub fn softmax_backward(output: &Tensor, grad: &Tensor) -> Result<Tensor> {
    grad.ensure_same_shape(output, "softmax backward")?;
    let mut dx = grad.clone();
    for r in 0..output.rows() {
        let y = output.row_slice(r);
        let dot: f64 = y.iter().zip(grad.row_slice(r)).map(|(a, b)| a * b).sum();
        for (d, &yk) in dx.row_slice_mut(r).iter_mut().zip(y) {
            *d = yk * (*d - dot);
        }
    }
    Ok(dx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Forward intermediates for one layer of one pass.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    Dense {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: Option<BatchStats>,
    },
    Dropout {
        mask: Option<Tensor>,
    },
    Softmax {
        output: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Relu,
    BatchNorm(BatchNorm),
    Dropout(Dropout),
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Relu => LayerKind::Relu,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut PassContext<'_>) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Dense(d) => d.forward(x),
            Layer::Relu => Ok(relu_forward(x)),
            Layer::BatchNorm(b) => b.forward(x, ctx.mode),
            Layer::Dropout(d) => Ok(d.forward(x, ctx.dropout_active, &mut *ctx.rng)),
            Layer::Softmax => {
                let out = softmax_forward(x)?;
                Ok((out.clone(), LayerCache::Softmax { output: out }))
            }
        }
    }

    /// Returns the gradient w.r.t. the layer input and the parameter
    /// gradients in [`Layer::params`] order.
    pub fn backward(&self, cache: &LayerCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Dense { input }) => d.backward(input, grad),
            (Layer::Relu, LayerCache::Relu { input }) => Ok((relu_backward(input, grad)?, vec![])),
            (
                Layer::BatchNorm(b),
                LayerCache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            ) => b.backward(xhat, inv_std, batch_stats.is_some(), grad),
            (Layer::Dropout(_), LayerCache::Dropout { mask }) => match mask {
                Some(m) => Ok((grad.zip_map(m, |g, m| g * m)?, vec![])),
                None => Ok((grad.clone(), vec![])),
            },
            (Layer::Softmax, LayerCache::Softmax { output }) => Ok((softmax_backward(output, grad)?, vec![])),
            (layer, _) => Err(MudaError::State(format!(
                "cache does not belong to a {:?} layer",
                layer.kind()
            ))),
        }
    }
}
