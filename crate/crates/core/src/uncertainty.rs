//! MC-dropout ensembles, the predictive-variance estimator and the
//! model-uncertainty loss with its gradient.

use std::sync::OnceLock;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MudaError, Result};
use crate::ndcore::{Mode, Tensor};
use crate::nets::{Gradients, Network, ParamScope, Trace};

/// Rounding slack tolerated on the score simplex.
pub const ROW_SUM_TOL: f64 = 1e-10;
/// Negative variances above this are rounding noise and clamp to zero.
pub const NEGATIVE_VARIANCE_TOL: f64 = -1e-15;
/// Smoothing inside the square root of the loss; only the gradient path uses it.
pub const DIV_EPS: f64 = 1e-12;
pub const DEFAULT_PASSES: usize = 8;

/// How the per-sample variance vector is reduced to a scalar loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceNorm {
    /// L2 norm of the element-wise standard deviation, i.e. `sqrt(Σ_k var_k)`.
    #[default]
    StdL2,
    /// L2 norm of the variance vector.
    VarL2,
}

/// `M` stochastic softmax outputs for `N` samples over `K` classes.
#[derive(Debug, Clone)]
pub struct McEnsemble {
    scores: Tensor,
    mean: OnceLock<Tensor>,
}

impl PartialEq for McEnsemble {
    fn eq(&self, other: &Self) -> bool {
        self.scores == other.scores
    }
}

impl McEnsemble {
    /// Wraps an `[M×N×K]` score tensor, checking `M ≥ 2` and that every row
    /// lies on the probability simplex.
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.ndim() != 3 {
            return Err(MudaError::Shape {
                context: "ensemble must be [M, N, K]",
                left: scores.shape().to_vec(),
                right: vec![0, 0, 0],
            });
        }
        if scores.shape()[0] < 2 {
            return Err(MudaError::config("m", "an ensemble needs at least 2 passes"));
        }
        let k = scores.shape()[2];
        for (i, row) in scores.data().chunks(k).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) || (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(MudaError::Validation(format!(
                    "ensemble row {i} is not a probability vector (sum {total})"
                )));
            }
        }
        Ok(McEnsemble {
            scores,
            mean: OnceLock::new(),
        })
    }

    /// Stacks per-pass `[N×K]` score matrices.
    pub fn from_passes(passes: &[Tensor]) -> Result<Self> {
        let first = passes
            .first()
            .ok_or_else(|| MudaError::config("m", "an ensemble needs at least 2 passes"))?;
        let mut data = Vec::with_capacity(first.len() * passes.len());
        for p in passes {
            p.ensure_same_shape(first, "ensemble pass")?;
            data.extend_from_slice(p.data());
        }
        McEnsemble::new(Tensor::new(vec![passes.len(), first.rows(), first.cols()], data)?)
    }

    pub fn passes(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    /// Score vector of pass `m` for sample `n`.
    pub fn score(&self, m: usize, n: usize) -> &[f64] {
        let (ns, k) = (self.samples(), self.classes());
        let start = (m * ns + n) * k;
        &self.scores.data()[start..start + k]
    }

    /// `[N×K]` scores of pass `m`.
    pub fn pass(&self, m: usize) -> Tensor {
        let (n, k) = (self.samples(), self.classes());
        let data = self.scores.data()[m * n * k..(m + 1) * n * k].to_vec();
        Tensor::new(vec![n, k], data).expect("slice of a valid ensemble")
    }

    /// MC mean `ȳ = (1/M) Σ_m ŷ_m`, computed once.
    pub fn mean(&self) -> &Tensor {
        self.mean.get_or_init(|| {
            let (m, n, k) = (self.passes(), self.samples(), self.classes());
            let mut out = vec![0.0; n * k];
            for chunk in self.scores.data().chunks(n * k) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= m as f64);
            Tensor::new(vec![n, k], out).expect("mean shape")
        })
    }

    /// True when all `M` score rows of sample `n` are bit-identical.
    pub fn is_degenerate(&self, n: usize) -> bool {
        let first = self.score(0, n);
        (1..self.passes()).all(|m| self.score(m, n) == first)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyEstimate {
    /// Clamped per-class variance, `[N×K]`.
    pub variance: Tensor,
    pub per_sample_loss: Vec<f64>,
    pub mean_loss: f64,
}

/// Biased per-class variance `(1/M) Σ ŷ² − ȳ²`, before clamping.
pub fn raw_variance(e: &McEnsemble) -> Tensor {
    raw_variance_of(e.scores())
}

fn raw_variance_of(scores: &Tensor) -> Tensor {
    let (m, n, k) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let data = scores.data();
    let mut first = vec![0.0; n * k];
    let mut second = vec![0.0; n * k];
    let mut constant = vec![true; n * k];
    for chunk in data.chunks(n * k) {
        for (i, &v) in chunk.iter().enumerate() {
            first[i] += v;
            second[i] += v * v;
            constant[i] &= v == data[i];
        }
    }
    // A column equal in every pass has variance exactly zero; the one-pass
    // formula would leave rounding residue there.
    let var = (0..n * k)
        .map(|i| {
            if constant[i] {
                return 0.0;
            }
            let mu = first[i] / m as f64;
            second[i] / m as f64 - mu * mu
        })
        .collect();
    Tensor::new(vec![n, k], var).expect("variance shape")
}

fn reduce(variance: &[f64], norm: DivergenceNorm) -> f64 {
    match norm {
        DivergenceNorm::StdL2 => variance.iter().sum::<f64>().sqrt(),
        DivergenceNorm::VarL2 => variance.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// Predictive variance per sample and class, and the uncertainty loss
/// `mean_n ‖σ̂(x_n)‖` under the chosen norm.
pub fn predictive_variance(e: &McEnsemble, norm: DivergenceNorm) -> Result<UncertaintyEstimate> {
    let mut variance = raw_variance(e);
    for (i, v) in variance.data_mut().iter_mut().enumerate() {
        if *v < 0.0 {
            if *v < NEGATIVE_VARIANCE_TOL {
                return Err(MudaError::Numerical(format!("variance entry {i} is {v}")));
            }
            *v = 0.0;
        }
    }
    let per_sample_loss: Vec<f64> = (0..e.samples()).map(|n| reduce(variance.row_slice(n), norm)).collect();
    let mean_loss = per_sample_loss.iter().sum::<f64>() / e.samples() as f64;
    Ok(UncertaintyEstimate {
        variance,
        per_sample_loss,
        mean_loss,
    })
}

/// The smoothed loss whose gradient [`loss_gradient`] returns.
pub fn smoothed_loss(e: &McEnsemble, norm: DivergenceNorm) -> f64 {
    let var = raw_variance(e);
    let total: f64 = (0..e.samples())
        .map(|n| {
            let row = var.row_slice(n);
            match norm {
                DivergenceNorm::StdL2 => row.iter().map(|v| v.max(0.0) + DIV_EPS).sum::<f64>().sqrt(),
                DivergenceNorm::VarL2 => (row.iter().map(|v| v * v).sum::<f64>() + DIV_EPS).sqrt(),
            }
        })
        .sum();
    total / e.samples() as f64
}

/// Gradient of the smoothed mean loss w.r.t. every score, `[M×N×K]`.
/// Samples whose passes coincide exactly get a zero gradient.
pub fn loss_gradient(e: &McEnsemble, norm: DivergenceNorm) -> Tensor {
    let (m, n, k) = (e.passes(), e.samples(), e.classes());
    let var = raw_variance(e);
    let mean = e.mean();
    let mut grad = Tensor::zeros(&[m, n, k]);
    for s in 0..n {
        if e.is_degenerate(s) {
            continue;
        }
        let v = var.row_slice(s);
        // dL_s/dv_k
        let dv: Vec<f64> = match norm {
            DivergenceNorm::StdL2 => {
                let root = v.iter().map(|x| x.max(0.0) + DIV_EPS).sum::<f64>().sqrt();
                vec![0.5 / root; k]
            }
            DivergenceNorm::VarL2 => {
                let root = (v.iter().map(|x| x * x).sum::<f64>() + DIV_EPS).sqrt();
                v.iter().map(|x| x / root).collect()
            }
        };
        let mu = mean.row_slice(s);
        for p in 0..m {
            let y = e.score(p, s);
            let start = (p * n + s) * k;
            let out = &mut grad.data_mut()[start..start + k];
            for c in 0..k {
                out[c] = dv[c] * 2.0 / m as f64 * (y[c] - mu[c]) / n as f64;
            }
        }
    }
    grad
}

/// Fixed-size worker pool for MC passes. Results are always gathered by
/// pass index, so output does not depend on the thread count.
pub struct Workers {
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(MudaError::config("threads", "must be at least 1"));
        }
        if threads == 1 {
            return Ok(Workers { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| MudaError::State(format!("cannot start worker pool: {e}")))?;
        Ok(Workers { pool: Some(pool) })
    }

    pub fn sequential() -> Self {
        Workers { pool: None }
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| (0..n).into_par_iter().map(f).collect())
            }
        }
    }
}

/// An ensemble together with the traces needed to backpropagate through it.
#[derive(Debug, Clone)]
pub struct McSample {
    pub ensemble: McEnsemble,
    pub traces: Vec<Trace>,
    /// Set when the network has no stochastic layer and the loss is identically zero.
    pub warning: Option<String>,
}

/// Generator for pass `m` of a sampling round seeded with `base`.
pub fn pass_rng(base: u64, m: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(m as u64);
    rng
}

/// Runs `passes` stochastic forward passes with dropout active.
///
/// One seed is drawn from `rng`; pass `m` uses its own stream derived from
/// it, so the result is identical for any worker count. Dropout is only
/// active inside this call.
pub fn mc_sample(
    net: &Network,
    x: &Tensor,
    passes: usize,
    mode: Mode,
    rng: &mut dyn RngCore,
    workers: &Workers,
) -> Result<McSample> {
    if passes < 2 {
        return Err(MudaError::config(
            "m",
            format!("need at least 2 MC passes, got {passes}"),
        ));
    }
    let warning = (!net.is_stochastic())
        .then(|| "network has no dropout with positive rate; the uncertainty loss is identically zero".to_string());
    let base = rng.next_u64();
    let results = workers.map(passes, |m| {
        let mut pass = pass_rng(base, m);
        net.forward(x, mode, true, &mut pass)
    });
    let mut outputs = Vec::with_capacity(passes);
    let mut traces = Vec::with_capacity(passes);
    for r in results {
        let (out, trace) = r?;
        outputs.push(out);
        traces.push(trace);
    }
    Ok(McSample {
        ensemble: McEnsemble::from_passes(&outputs)?,
        traces,
        warning,
    })
}

/// Gradient of `weight · L_div` w.r.t. the feature-extractor parameters,
/// summed over the passes through each pass's own dropout masks.
pub fn uncertainty_loss_backward(
    net: &Network,
    sample: &McSample,
    norm: DivergenceNorm,
    weight: f64,
    workers: &Workers,
) -> Result<Gradients> {
    let e = &sample.ensemble;
    if sample.traces.len() != e.passes() {
        return Err(MudaError::State(format!(
            "{} traces for {} passes",
            sample.traces.len(),
            e.passes()
        )));
    }
    let mut total = Gradients::zeros_like(net);
    let grad = loss_gradient(e, norm);
    if grad.data().iter().all(|&g| g == 0.0) {
        return Ok(total);
    }
    let (n, k) = (e.samples(), e.classes());
    let per_pass = workers.map(e.passes(), |m| {
        let g = Tensor::new(vec![n, k], grad.data()[m * n * k..(m + 1) * n * k].to_vec())?;
        net.backward(&sample.traces[m], &g.scale(weight))
    });
    for g in per_pass {
        total.add_assign(&g?)?;
    }
    total.restrict(ParamScope::Feature);
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    /// Mean over samples of `(1/M²) Σ_i Σ_j ‖ŷ_i − ŷ_j‖²`.
    pub lhs: f64,
    /// `2 · mean_n Σ_k var_k`, unclamped.
    pub rhs: f64,
    pub gap: f64,
}

/// Brute-force check that the mean ordered-pair squared difference equals
/// twice the biased variance over the empirical pass distribution.
pub fn pairwise_identity_check(e: &McEnsemble) -> IdentityCheck {
    pairwise_identity_raw(e.scores()).expect("ensemble is [M, N, K]")
}

/// [`pairwise_identity_check`] on any `[M×N×K]` array of reals.
pub fn pairwise_identity_raw(scores: &Tensor) -> Result<IdentityCheck> {
    let &[m, n, k] = scores.shape() else {
        return Err(MudaError::Shape {
            context: "identity check needs [M, N, K]",
            left: scores.shape().to_vec(),
            right: vec![0, 0, 0],
        });
    };
    let at = |p: usize, s: usize| &scores.data()[(p * n + s) * k..(p * n + s + 1) * k];
    let mut lhs = 0.0;
    for s in 0..n {
        for i in 0..m {
            for j in 0..m {
                lhs += at(i, s)
                    .iter()
                    .zip(at(j, s))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
    }
    lhs /= (m * m * n) as f64;
    let rhs = 2.0 * raw_variance_of(scores).sum() / n as f64;
    Ok(IdentityCheck {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}
