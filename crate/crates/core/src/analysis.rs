//! Hypothesis-disagreement diagnostics over MC-dropout samples.
//!
//! Each MC pass is treated as one hypothesis. Rates use hard labels (argmax,
//! lowest index on ties) over unordered pairs of distinct passes; the
//! identity check in [`crate::uncertainty`] instead uses all ordered pairs
//! including self-pairs.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MudaError, Result};
use crate::ndcore::{Mode, Tensor};
use crate::nets::Network;
use crate::uncertainty::{mc_sample, McEnsemble, Workers};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.959963984540054;

pub fn disagreement_rate(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MudaError::Shape {
            context: "disagreement label vectors",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let differ = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(differ as f64 / a.len() as f64)
}

/// Hard labels of every pass.
pub fn pass_labels(e: &McEnsemble) -> Vec<Vec<usize>> {
    (0..e.passes()).map(|m| e.pass(m).argmax_rows()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    /// `M×M`, symmetric, zero diagonal.
    pub pairwise_rates: Vec<Vec<f64>>,
    pub supremum: f64,
    pub expectation: f64,
    /// Population standard deviation over the unordered pairs.
    pub std: f64,
}

impl DisagreementReport {
    /// Upper end of the 95% normal interval around the expectation.
    pub fn ci95_upper(&self) -> f64 {
        self.expectation + Z95 * self.std
    }
}

pub fn sup_vs_expectation(e: &McEnsemble) -> DisagreementReport {
    let labels = pass_labels(e);
    let m = labels.len();
    let mut rates = vec![vec![0.0; m]; m];
    let mut pairs = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let r = disagreement_rate(&labels[i], &labels[j]).expect("passes share N");
            rates[i][j] = r;
            rates[j][i] = r;
            pairs.push(r);
        }
    }
    let count = pairs.len() as f64;
    let expectation = pairs.iter().sum::<f64>() / count;
    let supremum = pairs.iter().copied().fold(0.0, f64::max);
    let std = (pairs.iter().map(|r| (r - expectation).powi(2)).sum::<f64>() / count).sqrt();
    DisagreementReport {
        pairwise_rates: rates,
        // max ≥ mean holds exactly; guard against the last-bit rounding of the mean
        supremum: supremum.max(expectation),
        expectation,
        std,
    }
}

/// `2 · max_{i<j} mean_n ‖ŷ_i(x_n) − ŷ_j(x_n)‖²`.
pub fn squared_disagreement_divergence(e: &McEnsemble) -> f64 {
    let (m, n) = (e.passes(), e.samples());
    let mut best: f64 = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let total: f64 = (0..n)
                .map(|s| {
                    e.score(i, s)
                        .iter()
                        .zip(e.score(j, s))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum();
            best = best.max(total / n as f64);
        }
    }
    2.0 * best
}

/// Mean over unordered pairs of the same quantity, for comparison with the supremum form.
pub fn mean_squared_disagreement(e: &McEnsemble) -> f64 {
    let (m, n) = (e.passes(), e.samples());
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in (i + 1)..m {
            total += (0..n)
                .map(|s| {
                    e.score(i, s)
                        .iter()
                        .zip(e.score(j, s))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n as f64;
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDisagreement {
    pub epoch: usize,
    pub report: DisagreementReport,
}

/// Per-epoch disagreement on a fixed target batch. Each epoch's passes use
/// a generator seeded from `(seed, epoch)` with batch norm in eval mode.
pub struct DivergenceTracker {
    batch: Tensor,
    passes: usize,
    seed: u64,
    series: Vec<EpochDisagreement>,
}

impl DivergenceTracker {
    pub fn new(batch: Tensor, passes: usize, seed: u64) -> Result<Self> {
        if passes < 2 {
            return Err(MudaError::config("m", "tracker needs at least 2 passes"));
        }
        Ok(DivergenceTracker {
            batch,
            passes,
            seed,
            series: Vec::new(),
        })
    }

    pub fn measure(&self, net: &Network, epoch: usize, workers: &Workers) -> Result<DisagreementReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let sample = mc_sample(net, &self.batch, self.passes, Mode::Eval, &mut rng, workers)?;
        Ok(sup_vs_expectation(&sample.ensemble))
    }

    pub fn record(&mut self, net: &Network, epoch: usize, workers: &Workers) -> Result<()> {
        let report = self.measure(net, epoch, workers)?;
        self.series.push(EpochDisagreement { epoch, report });
        Ok(())
    }

    pub fn series(&self) -> &[EpochDisagreement] {
        &self.series
    }
}

/// CSV with header `epoch,sup,exp,std`.
pub fn divergence_csv(series: &[EpochDisagreement]) -> String {
    let mut out = String::from("epoch,sup,exp,std\n");
    for e in series {
        writeln!(
            out,
            "{},{},{},{}",
            e.epoch, e.report.supremum, e.report.expectation, e.report.std
        )
        .expect("write to string");
    }
    out
}
