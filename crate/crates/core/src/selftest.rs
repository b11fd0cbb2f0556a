//! Randomized consistency suites: finite-difference gradient checks of every
//! layer type and of both losses, the pairwise-difference identity of the
//! variance estimator, and estimator and disagreement invariants.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::sup_vs_expectation;
use crate::error::Result;
use crate::ndcore::gradcheck::{grad_check, DEFAULT_STEP};
use crate::ndcore::layers::{BatchNorm, Dense, Dropout, Layer, LayerCache, PassContext};
use crate::ndcore::{cross_entropy, one_hot, Mode, Tensor};
use crate::nets::{LayerSpec, Network, NetworkSpec, ParamScope};
use crate::uncertainty::{
    mc_sample, pairwise_identity_raw, predictive_variance, uncertainty_loss_backward, DivergenceNorm, McEnsemble,
    Workers, DIV_EPS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instance: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSuiteReport {
    pub cases: Vec<CaseResult>,
}

impl GradientSuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    /// Worst error per case name, in first-seen order.
    pub fn by_case(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|(n, _)| *n == c.name) {
                Some((_, e)) => *e = e.max(c.max_rel_error),
                None => out.push((c.name.clone(), c.max_rel_error)),
            }
        }
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape")
}

/// Values bounded away from zero, so ReLU kinks stay outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Checks one layer under the scalar objective `Σ r ⊙ layer(x)`.
fn check_layer(
    build: &dyn Fn(&[Tensor]) -> Result<Layer>,
    params: Vec<Tensor>,
    x: Tensor,
    mode: Mode,
    mask_seed: Option<u64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let layer = build(&params)?;
    let run = |layer: &Layer, x: &Tensor| -> Result<(Tensor, LayerCache)> {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed.unwrap_or(0));
        let mut ctx = PassContext {
            mode,
            dropout_active: mask_seed.is_some(),
            rng: &mut mask_rng,
        };
        layer.forward(x, &mut ctx)
    };
    let (y, cache) = run(&layer, &x)?;
    let r = uniform(rng, y.shape(), 1.0);
    let (dx, dparams) = layer.backward(&cache, &r)?;
    let mut point = vec![x];
    point.extend(params);
    let mut analytic = vec![dx];
    analytic.extend(dparams);
    let report = grad_check(&point, &analytic, DEFAULT_STEP, |p| {
        let layer = build(&p[1..])?;
        let (y, _) = run(&layer, &p[0])?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    })?;
    Ok(report.max_rel_error)
}

fn random_net(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Result<Network> {
    let h = rng.random_range(3..=7);
    let spec = NetworkSpec {
        input_dim: d,
        num_classes: k,
        feature_layers: vec![
            LayerSpec::Dense { units: h },
            LayerSpec::batch_norm(),
            LayerSpec::Relu,
            LayerSpec::Dense { units: h },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.3 },
        ],
        classifier_layers: vec![
            LayerSpec::Dense { units: k },
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Softmax,
        ],
    };
    let mut net = Network::new(spec, rng.next_u64())?;
    // A random point rather than the initialization: zero biases put
    // pre-activations of all-zero rows exactly on the ReLU kink.
    let values: Vec<Tensor> = net
        .parameter_values(ParamScope::All)
        .iter()
        .map(|t| t.map(|v| v + rng.random_range(-0.5..0.5)))
        .collect();
    net.set_parameter_values(ParamScope::All, &values)?;
    // Non-trivial running statistics so eval-mode batch norm is exercised.
    let mut bn_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let warm = uniform(rng, &[16, d], 2.0);
    let (_, trace) = net.forward(&warm, Mode::Train, true, &mut bn_rng)?;
    net.commit_running_stats(&trace)?;
    Ok(net)
}

fn with_values(net: &Network, scope: ParamScope, values: &[Tensor]) -> Result<Network> {
    let mut n = net.clone();
    n.set_parameter_values(scope, values)?;
    Ok(n)
}

/// Runs `instances` random instances of every case; all randomness derives
/// from `seed`.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<GradientSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for instance in 0..instances {
        let n = rng.random_range(3..=8);
        let din = rng.random_range(2..=5);
        let dout = rng.random_range(2..=5);
        let mut push = |name: &str, err: f64| {
            cases.push(CaseResult {
                name: name.to_string(),
                instance,
                max_rel_error: err,
            })
        };

        let dense = |p: &[Tensor]| Ok(Layer::Dense(Dense::new(p[0].clone(), p[1].clone())?));
        let params = vec![uniform(&mut rng, &[din, dout], 1.0), uniform(&mut rng, &[1, dout], 1.0)];
        let x = uniform(&mut rng, &[n, din], 1.0);
        push("dense", check_layer(&dense, params, x, Mode::Train, None, &mut rng)?);

        let bn_stats = (
            uniform(&mut rng, &[1, din], 1.0),
            uniform(&mut rng, &[1, din], 1.0).map(|v| v.abs() + 0.5),
        );
        let bn = move |p: &[Tensor]| {
            let mut b = BatchNorm::new(din, 0.1, 1e-5)?;
            b.gamma.value = p[0].clone();
            b.beta.value = p[1].clone();
            b.running_mean = bn_stats.0.clone();
            b.running_var = bn_stats.1.clone();
            Ok(Layer::BatchNorm(b))
        };
        for (name, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_eval", Mode::Eval)] {
            let params = vec![uniform(&mut rng, &[1, din], 2.0), uniform(&mut rng, &[1, din], 1.0)];
            let x = uniform(&mut rng, &[n, din], 2.0);
            push(name, check_layer(&bn, params, x, mode, None, &mut rng)?);
        }

        let relu = |_: &[Tensor]| Ok(Layer::Relu);
        let x = away_from_zero(&mut rng, &[n, din]);
        push("relu", check_layer(&relu, vec![], x, Mode::Train, None, &mut rng)?);

        let dropout = |_: &[Tensor]| Ok(Layer::Dropout(Dropout::new(0.4)?));
        let x = uniform(&mut rng, &[n, din], 1.0);
        let mask_seed = rng.next_u64();
        push(
            "dropout",
            check_layer(&dropout, vec![], x, Mode::Train, Some(mask_seed), &mut rng)?,
        );

        let softmax = |_: &[Tensor]| Ok(Layer::Softmax);
        let x = uniform(&mut rng, &[n, din], 2.0);
        push(
            "softmax",
            check_layer(&softmax, vec![], x, Mode::Train, None, &mut rng)?,
        );

        // Composite losses on a small network with dropout in F and C.
        let k = rng.random_range(2..=4);
        let net = random_net(&mut rng, din, k)?;
        let x = uniform(&mut rng, &[n, din], 1.5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let y = one_hot(&labels, k)?;

        let mask_seed = rng.next_u64();
        let cls = |net: &Network| -> Result<(f64, crate::nets::Gradients)> {
            let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
            let (scores, trace) = net.forward(&x, Mode::Train, true, &mut r)?;
            let ce = cross_entropy(&scores, &y)?;
            Ok((ce.loss, net.backward_from_logits(&trace, &ce.grad_logits)?))
        };
        let (_, grads) = cls(&net)?;
        let point = net.parameter_values(ParamScope::All);
        let report = grad_check(&point, grads.scope(ParamScope::All), DEFAULT_STEP, |p| {
            Ok(cls(&with_values(&net, ParamScope::All, p)?)?.0)
        })?;
        push("classification_loss", report.max_rel_error);

        for (name, mode, norm) in [
            ("uncertainty_loss_eval_std", Mode::Eval, DivergenceNorm::StdL2),
            ("uncertainty_loss_train_std", Mode::Train, DivergenceNorm::StdL2),
            ("uncertainty_loss_eval_var", Mode::Eval, DivergenceNorm::VarL2),
        ] {
            let passes = rng.random_range(2..=5);
            let base = rng.next_u64();
            let workers = Workers::sequential();
            let div = |net: &Network| -> Result<(f64, crate::nets::Gradients)> {
                let mut r = ChaCha8Rng::seed_from_u64(base);
                let sample = mc_sample(net, &x, passes, mode, &mut r, &workers)?;
                let loss = centered_smoothed_loss(&sample.ensemble, norm);
                Ok((loss, uncertainty_loss_backward(net, &sample, norm, 1.0, &workers)?))
            };
            let (_, grads) = div(&net)?;
            let point = net.parameter_values(ParamScope::Feature);
            let report = grad_check(&point, grads.scope(ParamScope::Feature), DEFAULT_STEP, |p| {
                Ok(div(&with_values(&net, ParamScope::Feature, p)?)?.0)
            })?;
            push(name, report.max_rel_error);
        }
    }
    Ok(GradientSuiteReport { cases })
}

/// [`crate::uncertainty::smoothed_loss`] with the variance computed around the mean. Finite
/// differences of the one-pass form drown in cancellation when the spread
/// across passes is small.
pub fn centered_smoothed_loss(e: &McEnsemble, norm: DivergenceNorm) -> f64 {
    let var = centered_variance(e);
    let total: f64 = var
        .chunks(e.classes())
        .map(|row| match norm {
            DivergenceNorm::StdL2 => row.iter().map(|v| v + DIV_EPS).sum::<f64>().sqrt(),
            DivergenceNorm::VarL2 => (row.iter().map(|v| v * v).sum::<f64>() + DIV_EPS).sqrt(),
        })
        .sum();
    total / e.samples() as f64
}

/// Random score ensemble `[M, N, K]` with rows on the simplex.
pub fn random_ensemble(rng: &mut impl RngCore, m: usize, n: usize, k: usize) -> McEnsemble {
    let mut data = Vec::with_capacity(m * n * k);
    for _ in 0..m * n {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64) + 1e-3).collect();
        let total: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / total));
    }
    McEnsemble::new(Tensor::new(vec![m, n, k], data).expect("shape")).expect("simplex rows")
}

/// Largest identity gap over `count` random ensembles with `M ∈ [2, 32]`,
/// `N ≤ 64`, `K ≤ 10`.
pub fn identity_suite(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let m = rng.random_range(2..=32);
        let n = rng.random_range(1..=64);
        let k = rng.random_range(2..=10);
        let e = random_ensemble(&mut rng, m, n, k);
        worst = worst.max(pairwise_identity_raw(e.scores())?.gap);
    }
    Ok(worst)
}

/// Per-entry variance around the mean, `[N×K]`.
pub fn centered_variance(e: &McEnsemble) -> Vec<f64> {
    let (m, n, k) = (e.passes(), e.samples(), e.classes());
    let mean = e.mean();
    let mut out = Vec::with_capacity(n * k);
    for s in 0..n {
        for c in 0..k {
            let mu = mean.row_slice(s)[c];
            out.push((0..m).map(|p| (e.score(p, s)[c] - mu).powi(2)).sum::<f64>() / m as f64);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport {
    /// Largest gap between the one-pass estimator and [`centered_variance`].
    pub estimator_gap: f64,
    /// Ensembles whose supremum disagreement fell below the expectation.
    pub ordering_violations: usize,
    pub ensembles: usize,
}

pub fn invariant_suite(count: usize, seed: u64) -> Result<InvariantReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = InvariantReport {
        estimator_gap: 0.0,
        ordering_violations: 0,
        ensembles: count,
    };
    for _ in 0..count {
        let m = rng.random_range(2..=32);
        let n = rng.random_range(1..=64);
        let k = rng.random_range(2..=10);
        let e = random_ensemble(&mut rng, m, n, k);
        let est = predictive_variance(&e, DivergenceNorm::StdL2)?;
        for (a, b) in est.variance.data().iter().zip(centered_variance(&e)) {
            report.estimator_gap = report.estimator_gap.max((a - b).abs());
        }
        let d = sup_vs_expectation(&e);
        if d.supremum < d.expectation {
            report.ordering_violations += 1;
        }
    }
    Ok(report)
}
