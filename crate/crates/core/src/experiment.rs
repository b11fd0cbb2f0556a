//! End-to-end runs: pretrain once, then adapt a source-only baseline and a
//! MUDA model from the same pretrained state, and write the run directory.
//!
//! Run directory layout:
//!
//! ```text
//! config.json                 effective config (re-runnable as is)
//! pretrain.csv                per-epoch pretraining metrics
//! metrics.csv                 per-epoch MUDA metrics
//! metrics_source_only.csv     per-epoch source-only metrics
//! divergence.csv              per-epoch hypothesis disagreement (MUDA)
//! timing.csv                  measured epoch times of every phase
//! ensemble.bin                MC ensemble of the final MUDA model
//! checkpoints/{pretrained,source_only,muda}.json
//! data/{source_test,target_test}.bin
//! summary.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{divergence_csv, DivergenceTracker, EpochDisagreement};
use crate::checkpoint::Checkpoint;
use crate::config::{Domains, ExperimentConfig};
use crate::dumps::{write_dataset, write_ensemble};
use crate::error::{MudaError, Result};
use crate::ndcore::Mode;
use crate::nets::Network;
use crate::trainer::{
    derive_seed, evaluate, streams, AdaptVariant, EvalSets, Evaluation, RunLog, TrainConfig, Trainer,
};
use crate::uncertainty::{mc_sample, McEnsemble};

/// Where the effective seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Config,
    Flag,
    Environment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub seed: Option<(u64, SeedSource)>,
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed: None, threads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub epochs: usize,
    pub source: Evaluation,
    pub target: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub source_id: String,
    pub target_id: String,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub seed_source: SeedSource,
    /// SHA-256 of `config.json`.
    pub config_sha256: String,
    /// SHA-256 of the default training configuration.
    pub default_train_sha256: String,
    /// Training fields that differ from the defaults, plus a seed override.
    pub overrides: BTreeMap<String, serde_json::Value>,
    pub data: DataSummary,
    pub pretrain: PhaseResult,
    pub source_only: PhaseResult,
    pub muda: PhaseResult,
    pub warnings: Vec<String>,
}

pub struct ExperimentOutcome {
    /// The configuration actually run, seed resolved.
    pub config: ExperimentConfig,
    pub domains: Domains,
    pub pretrain: RunLog,
    pub source_only: RunLog,
    pub muda: RunLog,
    pub divergence: Vec<EpochDisagreement>,
    pub pretrained_net: Network,
    pub source_only_net: Network,
    pub muda_net: Network,
    pub checkpoints: Vec<(&'static str, Checkpoint)>,
    pub ensemble: McEnsemble,
    pub ensemble_seed: u64,
    pub summary: Summary,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn overrides(train: &TrainConfig, seed: Option<(u64, SeedSource)>) -> BTreeMap<String, serde_json::Value> {
    let current = serde_json::to_value(train).expect("config serializes");
    let default = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let mut out = BTreeMap::new();
    if let (Some(cur), Some(def)) = (current.as_object(), default.as_object()) {
        for (key, value) in cur {
            if key != "seed" && def.get(key) != Some(value) {
                out.insert(format!("train.{key}"), value.clone());
            }
        }
    }
    if let Some((s, source)) = seed {
        if source != SeedSource::Config {
            out.insert("seed".into(), serde_json::json!({ "value": s, "from": source }));
        }
    }
    out
}

fn phase(net: &Network, log: &RunLog, domains: &Domains) -> Result<PhaseResult> {
    Ok(PhaseResult {
        epochs: log.records.len(),
        source: evaluate(net, &domains.source_test)?,
        target: evaluate(net, &domains.target_test)?,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let mut config = cfg.clone();
    if let Some((seed, _)) = opts.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    let seed = config.train.seed;
    let domains = config.domains(seed)?;
    let spec = config.network_spec(domains.source_train.dim(), domains.source_train.num_classes())?;
    let trainer = Trainer::new(config.train.clone(), opts.threads)?;
    let eval = EvalSets {
        source: Some(&domains.source_test),
        target: Some(&domains.target_test),
    };
    // The adaptation loop only ever sees the unlabeled copy.
    let target_train = domains.target_train.unlabeled();

    let mut pretrained = Network::new(spec, derive_seed(seed, streams::INIT))?;
    let mut pretrain_opt = config.train.optimizer()?;
    let pretrain = trainer.pretrain_with(&mut pretrained, &domains.source_train, eval, &mut pretrain_opt)?;

    let mut source_only_net = pretrained.clone();
    let mut source_only_state = trainer.adapt_state()?;
    let source_only = trainer.adapt_with(
        &mut source_only_net,
        &domains.source_train,
        &target_train,
        AdaptVariant::SourceOnly,
        eval,
        None,
        &mut source_only_state,
    )?;

    let rows = config.analysis.tracker_batch.min(domains.target_test.len());
    let batch = domains.target_test.inputs().select_rows(&(0..rows).collect::<Vec<_>>());
    let mut tracker = DivergenceTracker::new(
        batch.clone(),
        config.analysis.tracker_passes,
        derive_seed(seed, streams::TRACKER),
    )?;
    let mut muda_net = pretrained.clone();
    let mut muda_state = trainer.adapt_state()?;
    let muda = trainer.adapt_with(
        &mut muda_net,
        &domains.source_train,
        &target_train,
        AdaptVariant::Muda,
        eval,
        Some(&mut tracker),
        &mut muda_state,
    )?;

    let ensemble_seed = derive_seed(seed, streams::TRACKER).wrapping_add(1);
    let mut rng = crate::trainer::stream_rng(ensemble_seed, 0);
    let ensemble = mc_sample(
        &muda_net,
        &batch,
        config.train.m,
        Mode::Eval,
        &mut rng,
        trainer.workers(),
    )?
    .ensemble;

    let config_json = config.to_json();
    let mut warnings = source_only.warnings.clone();
    for w in &muda.warnings {
        if !warnings.contains(w) {
            warnings.push(w.clone());
        }
    }
    let summary = Summary {
        name: config.name.clone(),
        seed,
        seed_source: opts.seed.map(|(_, s)| s).unwrap_or(SeedSource::Config),
        config_sha256: sha256_hex(config_json.as_bytes()),
        default_train_sha256: sha256_hex(
            serde_json::to_string_pretty(&TrainConfig::default())
                .expect("serializes")
                .as_bytes(),
        ),
        overrides: overrides(&config.train, opts.seed),
        data: DataSummary {
            source_id: domains.source_train.domain_id().to_string(),
            target_id: domains.target_train.domain_id().to_string(),
            source_train: domains.source_train.len(),
            source_test: domains.source_test.len(),
            target_train: domains.target_train.len(),
            target_test: domains.target_test.len(),
        },
        pretrain: phase(&pretrained, &pretrain, &domains)?,
        source_only: phase(&source_only_net, &source_only, &domains)?,
        muda: phase(&muda_net, &muda, &domains)?,
        warnings,
    };
    let checkpoints = vec![
        (
            "pretrained",
            Checkpoint::capture(&pretrained, pretrain.records.len()).with_optimizer("all", &pretrain_opt),
        ),
        (
            "source_only",
            Checkpoint::capture(&source_only_net, source_only.records.len())
                .with_optimizer("c", &source_only_state.opt_c)
                .with_optimizer("f", &source_only_state.opt_f),
        ),
        (
            "muda",
            Checkpoint::capture(&muda_net, muda.records.len())
                .with_optimizer("c", &muda_state.opt_c)
                .with_optimizer("f", &muda_state.opt_f),
        ),
    ];
    Ok(ExperimentOutcome {
        checkpoints,
        divergence: tracker.series().to_vec(),
        config,
        domains,
        pretrain,
        source_only,
        muda,
        pretrained_net: pretrained,
        source_only_net,
        muda_net,
        ensemble,
        ensemble_seed,
        summary,
    })
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| MudaError::io(&path, e))
}

fn timing_csv(outcome: &ExperimentOutcome) -> String {
    let mut out = String::from("phase,epoch,wall_ms\n");
    for (name, log) in [
        ("pretrain", &outcome.pretrain),
        ("source_only", &outcome.source_only),
        ("muda", &outcome.muda),
    ] {
        for r in &log.records {
            writeln!(out, "{name},{},{:.3}", r.epoch, r.wall_ms).expect("write to string");
        }
    }
    out
}

/// Writes the run directory described in the module docs.
pub fn write_artifacts(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    for sub in [dir.to_path_buf(), dir.join("checkpoints"), dir.join("data")] {
        std::fs::create_dir_all(&sub).map_err(|e| MudaError::io(&sub, e))?;
    }
    let wall = outcome.config.analysis.wall_clock;
    write(dir.join("config.json"), outcome.config.to_json())?;
    write(dir.join("pretrain.csv"), outcome.pretrain.metrics_csv(wall))?;
    write(dir.join("metrics.csv"), outcome.muda.metrics_csv(wall))?;
    write(
        dir.join("metrics_source_only.csv"),
        outcome.source_only.metrics_csv(wall),
    )?;
    write(dir.join("divergence.csv"), divergence_csv(&outcome.divergence))?;
    write(dir.join("timing.csv"), timing_csv(outcome))?;
    write_ensemble(dir.join("ensemble.bin"), &outcome.ensemble, outcome.ensemble_seed)?;
    for (name, ckpt) in &outcome.checkpoints {
        ckpt.save(dir.join("checkpoints").join(format!("{name}.json")))?;
    }
    write_dataset(dir.join("data/source_test.bin"), &outcome.domains.source_test)?;
    write_dataset(dir.join("data/target_test.bin"), &outcome.domains.target_test)?;
    let summary = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    write(dir.join("summary.json"), summary + "\n")?;
    Ok(())
}
