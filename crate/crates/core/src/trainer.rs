//! Source pretraining and the alternating adaptation loop.
//!
//! Each adaptation iteration:
//!
//! 1. draws a labeled source minibatch and an unlabeled target minibatch;
//! 2. updates `C` on the source cross-entropy;
//! 3. recomputes the source loss with the new `C`, runs `M` dropout passes
//!    over the target minibatch, and updates `F` on
//!    `L_cls + λ·L_div`.
//!
//! Dropout is only active inside the MC passes; the classification passes
//! of the adaptation loop run without it. Batch-norm running statistics
//! are updated from the classifier-step source pass only.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::DivergenceTracker;
use crate::data::DomainDataset;
use crate::error::{MudaError, Result};
use crate::ndcore::{cross_entropy, layers::validate_rate, one_hot, Mode, Tensor};
use crate::nets::{Network, ParamScope};
use crate::optim::{Optimizer, OptimizerKind};
use crate::uncertainty::{mc_sample, predictive_variance, uncertainty_loss_backward, DivergenceNorm, Workers};

/// Named random streams derived from the run seed.
pub mod streams {
    pub const PRETRAIN_BATCH: u64 = 1;
    pub const PRETRAIN_DROPOUT: u64 = 2;
    pub const ADAPT_BATCH: u64 = 3;
    pub const ADAPT_MC: u64 = 4;
    pub const TRACKER: u64 = 5;
    pub const DATA_SOURCE: u64 = 6;
    pub const DATA_TARGET: u64 = 7;
    pub const DATA_SPLIT: u64 = 8;
    pub const INIT: u64 = 9;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A 64-bit seed derived from the run seed for one named purpose.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StopRule {
    /// Run exactly `adapt_epochs` epochs.
    MaxEpochs,
    /// Stop early once the mean `L_div` of the last `window` epochs differs
    /// from the previous window by at most `tol` relative.
    Plateau { window: usize, tol: f64 },
}

impl StopRule {
    pub fn plateau() -> Self {
        StopRule::Plateau { window: 10, tol: 1e-3 }
    }

    fn should_stop(&self, l_div: &[f64]) -> bool {
        match *self {
            StopRule::MaxEpochs => false,
            StopRule::Plateau { window, tol } => {
                if window == 0 || l_div.len() < 2 * window {
                    return false;
                }
                let n = l_div.len();
                let last = l_div[n - window..].iter().sum::<f64>() / window as f64;
                let prev = l_div[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
                (last - prev).abs() <= tol * prev.abs()
            }
        }
    }
}

/// Hyperparameters of pretraining and adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// MC-dropout passes per iteration.
    pub m: usize,
    pub rho_f: f64,
    pub rho_c: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerChoice,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    pub batch_size_source: usize,
    pub batch_size_target: usize,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub seed: u64,
    pub divergence_norm: DivergenceNorm,
    pub stop: StopRule,
    pub lambda_div: f64,
    /// Batch-norm mode of the MC passes over the target minibatch. `eval`
    /// normalizes target features with the running statistics that
    /// evaluation uses; `train` normalizes with target-batch statistics.
    pub mc_mode: Mode,
}

impl Default for TrainConfig {
    /// Toy two-moons defaults: batch 128, dropout 0.5 in `F`, `M = 8`.
    fn default() -> Self {
        TrainConfig {
            m: crate::uncertainty::DEFAULT_PASSES,
            rho_f: 0.5,
            rho_c: 0.0,
            lr: 1e-3,
            weight_decay: 5e-4,
            optimizer: OptimizerChoice::Adam,
            momentum: crate::optim::SGD_MOMENTUM,
            batch_size_source: 128,
            batch_size_target: 128,
            pretrain_epochs: 200,
            adapt_epochs: 200,
            seed: 0,
            divergence_norm: DivergenceNorm::StdL2,
            stop: StopRule::MaxEpochs,
            lambda_div: 1.0,
            mc_mode: Mode::Eval,
        }
    }
}

impl TrainConfig {
    /// Validates every field; errors carry `prefix.field` paths.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let path = |f: &str| format!("{prefix}.{f}");
        if self.m < 2 {
            return Err(MudaError::config(
                path("m"),
                format!("need at least 2 MC passes, got {}", self.m),
            ));
        }
        for (name, rate) in [("rho_f", self.rho_f), ("rho_c", self.rho_c)] {
            validate_rate(rate)
                .map_err(|_| MudaError::config(path(name), format!("must lie in [0, 1), got {rate}")))?;
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MudaError::config(path("lr"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(MudaError::config(path("weight_decay"), "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MudaError::config(path("momentum"), "must lie in [0, 1)"));
        }
        if self.batch_size_source == 0 {
            return Err(MudaError::config(path("batch_size_source"), "must be at least 1"));
        }
        if self.batch_size_target == 0 {
            return Err(MudaError::config(path("batch_size_target"), "must be at least 1"));
        }
        if !(self.lambda_div >= 0.0 && self.lambda_div.is_finite()) {
            return Err(MudaError::config(path("lambda_div"), "must be non-negative"));
        }
        if let StopRule::Plateau { window, tol } = self.stop {
            if window == 0 || tol.is_nan() || tol < 0.0 {
                return Err(MudaError::config(path("stop"), "plateau needs window ≥ 1 and tol ≥ 0"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        let kind = match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::adam(),
            OptimizerChoice::Sgd => OptimizerKind::Sgd {
                momentum: self.momentum,
            },
        };
        Optimizer::new(kind, self.lr, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_div: f64,
    pub src_acc: Option<f64>,
    pub tgt_acc: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub warnings: Vec<String>,
    pub checkpoint: Option<String>,
}

impl RunLog {
    fn warn(&mut self, message: String) {
        if !self.warnings.contains(&message) {
            self.warnings.push(message);
        }
    }

    pub fn l_div_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.l_div).collect()
    }

    /// CSV with header `epoch,l_cls,l_div,src_acc,tgt_acc,wall_ms`. With
    /// `wall_clock = false` the last column is written as 0 so the file is
    /// a pure function of the run configuration.
    pub fn metrics_csv(&self, wall_clock: bool) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,l_cls,l_div,src_acc,tgt_acc,wall_ms\n");
        for r in &self.records {
            let wall = if wall_clock { r.wall_ms.round() } else { 0.0 };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.l_cls,
                r.l_div,
                opt(r.src_acc),
                opt(r.tgt_acc),
                wall
            )
            .expect("write to string");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Recall per class; `None` for classes absent from the data.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the per-class recalls over present classes.
    pub per_class_mean: f64,
}

pub fn evaluate_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Evaluation> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(MudaError::Shape {
            context: "predictions vs labels",
            left: vec![preds.len()],
            right: vec![labels.len()],
        });
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(Evaluation {
        accuracy: correct as f64 / preds.len() as f64,
        per_class_mean: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Accuracy of the deterministic (eval mode, no dropout) predictor.
pub fn evaluate(net: &Network, data: &DomainDataset) -> Result<Evaluation> {
    let labels = data.require_labels()?;
    let preds = net.predict(data.inputs())?;
    evaluate_predictions(&preds, labels, data.num_classes())
}

/// Labeled held-out sets scored after every epoch. Target labels are read
/// here and nowhere else.
#[derive(Default, Clone, Copy)]
pub struct EvalSets<'a> {
    pub source: Option<&'a DomainDataset>,
    pub target: Option<&'a DomainDataset>,
}

impl EvalSets<'_> {
    fn score(&self, net: &Network) -> Result<(Option<f64>, Option<f64>)> {
        let src = self.source.map(|d| evaluate(net, d).map(|e| e.accuracy)).transpose()?;
        let tgt = self.target.map(|d| evaluate(net, d).map(|e| e.accuracy)).transpose()?;
        Ok((src, tgt))
    }
}

/// Endless shuffled minibatches; reshuffles whenever the data is exhausted.
struct CyclicSampler {
    order: Vec<usize>,
    pos: usize,
}

impl CyclicSampler {
    fn new(n: usize) -> Self {
        CyclicSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Whether the adaptation loop includes the uncertainty term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptVariant {
    Muda,
    /// Same alternating loop with the target branch removed.
    SourceOnly,
}

/// Per-run optimizer state of the alternating loop.
pub struct AdaptState {
    pub opt_c: Optimizer,
    pub opt_f: Optimizer,
    mc_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub l_cls: f64,
    pub l_div: f64,
}

pub struct Trainer {
    cfg: TrainConfig,
    workers: Workers,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, threads: usize) -> Result<Self> {
        cfg.validate("train")?;
        Ok(Trainer {
            cfg,
            workers: Workers::new(threads)?,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn workers(&self) -> &Workers {
        &self.workers
    }

    /// Minimizes source cross-entropy over all parameters with dropout
    /// active at the network's own rates.
    pub fn pretrain(&self, net: &mut Network, source: &DomainDataset, eval: EvalSets<'_>) -> Result<RunLog> {
        let mut opt = self.cfg.optimizer()?;
        self.pretrain_with(net, source, eval, &mut opt)
    }

    /// [`Trainer::pretrain`] with a caller-owned optimizer.
    pub fn pretrain_with(
        &self,
        net: &mut Network,
        source: &DomainDataset,
        eval: EvalSets<'_>,
        opt: &mut Optimizer,
    ) -> Result<RunLog> {
        let labels = source.require_labels()?;
        check_dims(net, source)?;
        let mut batch_rng = stream_rng(self.cfg.seed, streams::PRETRAIN_BATCH);
        let mut drop_rng = stream_rng(self.cfg.seed, streams::PRETRAIN_DROPOUT);
        let mut log = RunLog::default();
        let bs = self.cfg.batch_size_source;
        let mut order: Vec<usize> = (0..source.len()).collect();
        for epoch in 0..self.cfg.pretrain_epochs {
            let started = Instant::now();
            order.shuffle(&mut batch_rng);
            let mut loss_sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(bs) {
                let x = source.inputs().select_rows(chunk);
                let y = one_hot(
                    &chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
                    net.spec().num_classes,
                )?;
                let (scores, trace) = net.forward(&x, Mode::Train, true, &mut drop_rng)?;
                let ce = cross_entropy(&scores, &y)?;
                let grads = net.backward_from_logits(&trace, &ce.grad_logits)?;
                net.zero_grad(ParamScope::All);
                net.accumulate(&grads)?;
                opt.step(&mut net.parameters_mut(ParamScope::All))?;
                net.commit_running_stats(&trace)?;
                loss_sum += ce.loss;
                batches += 1;
            }
            let (src_acc, tgt_acc) = eval.score(net)?;
            log.records.push(EpochRecord {
                epoch,
                l_cls: loss_sum / batches as f64,
                l_div: 0.0,
                src_acc,
                tgt_acc,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok(log)
    }

    pub fn adapt_state(&self) -> Result<AdaptState> {
        Ok(AdaptState {
            opt_c: self.cfg.optimizer()?,
            opt_f: self.cfg.optimizer()?,
            mc_rng: stream_rng(self.cfg.seed, streams::ADAPT_MC),
        })
    }

    /// Classifier update on the source cross-entropy. Touches only `C`
    /// parameters (and batch-norm running statistics).
    pub fn c_update(&self, net: &mut Network, state: &mut AdaptState, xs: &Tensor, ys: &Tensor) -> Result<f64> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (scores, trace) = net.forward(xs, Mode::Train, false, &mut unused)?;
        let ce = cross_entropy(&scores, ys)?;
        let grads = net.backward_from_logits(&trace, &ce.grad_logits)?;
        net.zero_grad(ParamScope::All);
        net.accumulate(&grads)?;
        state.opt_c.step(&mut net.parameters_mut(ParamScope::Classifier))?;
        net.commit_running_stats(&trace)?;
        Ok(ce.loss)
    }

    /// Feature-extractor update on `L_cls + λ·L_div`; `xt = None` drops the
    /// uncertainty term. Touches only `F` parameters. Returns the
    /// classification loss, the (unsmoothed) uncertainty loss and any
    /// sampling warning.
    pub fn f_update(
        &self,
        net: &mut Network,
        state: &mut AdaptState,
        xs: &Tensor,
        ys: &Tensor,
        xt: Option<&Tensor>,
    ) -> Result<(StepOutcome, Option<String>)> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (scores, trace) = net.forward(xs, Mode::Train, false, &mut unused)?;
        let ce = cross_entropy(&scores, ys)?;
        let mut grads = net.backward_from_logits(&trace, &ce.grad_logits)?;
        let mut l_div = 0.0;
        let mut warning = None;
        if let Some(xt) = xt {
            let sample = mc_sample(net, xt, self.cfg.m, self.cfg.mc_mode, &mut state.mc_rng, &self.workers)?;
            l_div = predictive_variance(&sample.ensemble, self.cfg.divergence_norm)?.mean_loss;
            let div = uncertainty_loss_backward(
                net,
                &sample,
                self.cfg.divergence_norm,
                self.cfg.lambda_div,
                &self.workers,
            )?;
            if !div.is_zero() {
                grads.add_assign(&div)?;
            }
            warning = sample.warning;
        }
        net.zero_grad(ParamScope::All);
        net.accumulate(&grads)?;
        state.opt_f.step(&mut net.parameters_mut(ParamScope::Feature))?;
        Ok((StepOutcome { l_cls: ce.loss, l_div }, warning))
    }

    /// The alternating loop. Target labels, if present, are never read.
    pub fn adapt(
        &self,
        net: &mut Network,
        source: &DomainDataset,
        target: &DomainDataset,
        variant: AdaptVariant,
        eval: EvalSets<'_>,
        tracker: Option<&mut DivergenceTracker>,
    ) -> Result<RunLog> {
        let mut state = self.adapt_state()?;
        self.adapt_with(net, source, target, variant, eval, tracker, &mut state)
    }

    /// [`Trainer::adapt`] continuing from (and updating) existing optimizer state.
    #[allow(clippy::too_many_arguments)]
    pub fn adapt_with(
        &self,
        net: &mut Network,
        source: &DomainDataset,
        target: &DomainDataset,
        variant: AdaptVariant,
        eval: EvalSets<'_>,
        mut tracker: Option<&mut DivergenceTracker>,
        state: &mut AdaptState,
    ) -> Result<RunLog> {
        let labels = source.require_labels()?;
        if target.is_empty() {
            return Err(MudaError::Validation("target domain is empty".into()));
        }
        check_dims(net, source)?;
        check_dims(net, target)?;
        let target_inputs = target.inputs();
        net.set_dropout_rates(self.cfg.rho_f, self.cfg.rho_c)?;

        let mut batch_rng = stream_rng(self.cfg.seed, streams::ADAPT_BATCH);
        let mut src_sampler = CyclicSampler::new(source.len());
        let mut tgt_sampler = CyclicSampler::new(target.len());
        let bs_s = self.cfg.batch_size_source.min(source.len());
        let bs_t = self.cfg.batch_size_target.min(target.len());
        let iterations = source.len().div_ceil(bs_s).max(target.len().div_ceil(bs_t));

        let mut log = RunLog::default();
        for epoch in 0..self.cfg.adapt_epochs {
            let started = Instant::now();
            let (mut cls_sum, mut div_sum) = (0.0, 0.0);
            for _ in 0..iterations {
                let si = src_sampler.next(bs_s, &mut batch_rng);
                let ti = tgt_sampler.next(bs_t, &mut batch_rng);
                let xs = source.inputs().select_rows(&si);
                let ys = one_hot(
                    &si.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
                    net.spec().num_classes,
                )?;
                let xt = target_inputs.select_rows(&ti);

                cls_sum += self.c_update(net, state, &xs, &ys)?;
                let xt = (variant == AdaptVariant::Muda).then_some(&xt);
                let (outcome, warning) = self.f_update(net, state, &xs, &ys, xt)?;
                if let Some(w) = warning {
                    log.warn(w);
                }
                div_sum += outcome.l_div;
            }
            let (src_acc, tgt_acc) = eval.score(net)?;
            if let Some(t) = tracker.as_deref_mut() {
                t.record(net, epoch, &self.workers)?;
            }
            log.records.push(EpochRecord {
                epoch,
                l_cls: cls_sum / iterations as f64,
                l_div: div_sum / iterations as f64,
                src_acc,
                tgt_acc,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            if variant == AdaptVariant::Muda && self.cfg.stop.should_stop(&log.l_div_series()) {
                break;
            }
        }
        Ok(log)
    }
}

fn check_dims(net: &Network, data: &DomainDataset) -> Result<()> {
    if data.dim() != net.spec().input_dim {
        return Err(MudaError::Shape {
            context: "dataset dimension vs network input",
            left: vec![data.dim()],
            right: vec![net.spec().input_dim],
        });
    }
    if data.num_classes() != net.spec().num_classes {
        return Err(MudaError::Validation(format!(
            "domain `{}` has {} classes, network has {}",
            data.domain_id(),
            data.num_classes(),
            net.spec().num_classes
        )));
    }
    Ok(())
}
