//! The `muda` command line.
//!
//! Exit codes: 0 on success, 2 for configuration and usage errors, 3 for
//! runtime errors. Every error goes to standard error as one `error: ...`
//! line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{divergence_csv, squared_disagreement_divergence, sup_vs_expectation, EpochDisagreement};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::synthetic::{make_shifted_blobs, make_two_moons, MOONS_NOISE_STD};
use crate::dumps::{read_dataset, read_ensemble, write_dataset};
use crate::error::{MudaError, Result};
use crate::experiment::{run_experiment, write_artifacts, RunOptions, SeedSource};
use crate::selftest::{gradient_suite, identity_suite, invariant_suite};
use crate::trainer::{derive_seed, evaluate, streams};
use crate::uncertainty::{pairwise_identity_check, predictive_variance, DivergenceNorm};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Fallback seed when `--seed` is absent.
pub const SEED_ENV: &str = "MUDA_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "muda",
    version,
    about = "Domain adaptation by minimizing MC-dropout uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain, then adapt a source-only baseline and MUDA; write a run directory.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a labeled dataset dump.
    Eval(EvalArgs),
    /// Disagreement report for an ensemble dump.
    Analyze(AnalyzeArgs),
    /// Write a synthetic source/target pair as dataset dumps.
    GenData(GenDataArgs),
    /// Gradient-check, identity and invariant suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and MUDA_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to the config's `out_dir`, then `runs/<name>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for MC passes; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataKind {
    Moons,
    Blobs,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Target rotation in degrees (moons).
    #[arg(long, default_value_t = 30.0)]
    rotation: f64,
    /// Noise standard deviation (moons).
    #[arg(long, default_value_t = MOONS_NOISE_STD)]
    noise: f64,
    /// Number of classes (blobs).
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Target translation, comma separated (blobs).
    #[arg(long, value_delimiter = ',', default_value = "2,2")]
    shift: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// `--seed` beats `MUDA_SEED`; `None` leaves the config seed in place.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>) -> Result<Option<(u64, SeedSource)>> {
    if let Some(s) = flag {
        return Ok(Some((s, SeedSource::Flag)));
    }
    match env {
        None => Ok(None),
        Some(text) => text
            .trim()
            .parse()
            .map(|s| Some((s, SeedSource::Environment)))
            .map_err(|_| MudaError::config(SEED_ENV, format!("not an unsigned integer: {text:?}"))),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig::from_path(&args.config)?;
    let seed = resolve_seed(args.seed, env_seed().as_deref())?;
    let opts = RunOptions {
        seed,
        threads: args.threads,
    };
    let effective = seed.map(|(s, _)| s).unwrap_or(cfg.train.seed);
    let dir = match (&args.out, &cfg.out_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => d.clone(),
        (None, None) => PathBuf::from("runs").join(format!("{}-seed{effective}", cfg.name)),
    };
    let outcome = run_experiment(&cfg, &opts)?;
    write_artifacts(&outcome, &dir)?;
    let s = &outcome.summary;
    let mut report = || -> std::io::Result<()> {
        writeln!(out, "run {} seed {}", s.name, s.seed)?;
        writeln!(out, "source-only target accuracy {:.4}", s.source_only.target.accuracy)?;
        writeln!(out, "muda target accuracy {:.4}", s.muda.target.accuracy)?;
        for w in &s.warnings {
            writeln!(out, "warning: {w}")?;
        }
        writeln!(out, "artifacts in {}", dir.display())
    };
    report().map_err(|e| MudaError::io("<stdout>", e))
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let net = Checkpoint::load(&args.ckpt)?.network()?;
    let data = read_dataset(&args.data)?;
    let result = evaluate(&net, &data)?;
    let json = serde_json::to_string_pretty(&result).expect("evaluation serializes");
    writeln!(out, "{json}").map_err(|e| MudaError::io("<stdout>", e))
}

fn cmd_analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let (ensemble, seed) = read_ensemble(&args.ensemble)?;
    if ensemble.passes() < 2 {
        return Err(MudaError::Validation("disagreement needs at least 2 passes".into()));
    }
    let report = sup_vs_expectation(&ensemble);
    let loss = predictive_variance(&ensemble, DivergenceNorm::StdL2)?.mean_loss;
    let identity = pairwise_identity_check(&ensemble);
    let csv = divergence_csv(&[EpochDisagreement {
        epoch: 0,
        report: report.clone(),
    }]);
    std::fs::write(&args.out, csv).map_err(|e| MudaError::io(&args.out, e))?;
    let mut lines = || -> std::io::Result<()> {
        writeln!(
            out,
            "ensemble M={} N={} K={} seed={seed}",
            ensemble.passes(),
            ensemble.samples(),
            ensemble.classes()
        )?;
        writeln!(
            out,
            "sup {} exp {} std {}",
            report.supremum, report.expectation, report.std
        )?;
        writeln!(out, "exp ci95 upper {}", report.ci95_upper())?;
        writeln!(
            out,
            "squared disagreement divergence {}",
            squared_disagreement_divergence(&ensemble)
        )?;
        writeln!(out, "uncertainty loss (std) {loss}")?;
        writeln!(out, "pairwise identity gap {:e}", identity.gap)
    };
    lines().map_err(|e| MudaError::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MudaError::io(dir, e))
}

fn cmd_gen_data(args: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let seed = resolve_seed(args.seed, env_seed().as_deref())?
        .map(|(s, _)| s)
        .unwrap_or(0);
    let (source, target) = match args.kind {
        DataKind::Moons => (
            make_two_moons(args.n, args.noise, 0.0, derive_seed(seed, streams::DATA_SOURCE))?
                .with_domain_id("moons_source"),
            make_two_moons(
                args.n,
                args.noise,
                args.rotation,
                derive_seed(seed, streams::DATA_TARGET),
            )?
            .with_domain_id("moons_target"),
        ),
        DataKind::Blobs => make_shifted_blobs(args.n, args.k, &args.shift, derive_seed(seed, streams::DATA_SOURCE))?,
    };
    create_dir(&args.out)?;
    let paths = [args.out.join("source.bin"), args.out.join("target.bin")];
    write_dataset(&paths[0], &source)?;
    write_dataset(&paths[1], &target)?;
    for p in &paths {
        writeln!(out, "wrote {}", p.display()).map_err(|e| MudaError::io("<stdout>", e))?;
    }
    Ok(())
}

const GRADIENT_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-9;
const ESTIMATOR_TOL: f64 = 1e-12;

fn cmd_selftest(args: &SelftestArgs, out: &mut dyn Write) -> Result<()> {
    let io = |e| MudaError::io("<stdout>", e);
    let grads = gradient_suite(args.instances, args.seed)?;
    for (name, err) in grads.by_case() {
        writeln!(out, "gradient {name:<28} {err:.3e}").map_err(io)?;
    }
    let gap = identity_suite(100, args.seed)?;
    let inv = invariant_suite(50, args.seed)?;
    writeln!(out, "identity gap {gap:.3e}").map_err(io)?;
    writeln!(out, "estimator gap {:.3e}", inv.estimator_gap).map_err(io)?;
    writeln!(
        out,
        "sup < exp in {} of {} ensembles",
        inv.ordering_violations, inv.ensembles
    )
    .map_err(io)?;
    writeln!(out, "max gradient-check error {:.3e}", grads.max_rel_error()).map_err(io)?;
    // NaN counts as a failure.
    let within = |v: f64, tol: f64| v <= tol;
    let mut failed = Vec::new();
    if !within(grads.max_rel_error(), GRADIENT_TOL) {
        failed.push("gradient check");
    }
    if !within(gap, IDENTITY_TOL) {
        failed.push("pairwise identity");
    }
    if !within(inv.estimator_gap, ESTIMATOR_TOL) {
        failed.push("estimator");
    }
    if inv.ordering_violations > 0 {
        failed.push("disagreement ordering");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(MudaError::Check(format!("selftest failed: {}", failed.join(", "))))
    }
}

pub fn exit_code(err: &MudaError) -> i32 {
    if err.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_CONFIG;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::GenData(a) => cmd_gen_data(a, out),
        Command::Selftest(a) => cmd_selftest(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
