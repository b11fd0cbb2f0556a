//! Acceptance criteria 1 through 10. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.
//!
//! Run with `cargo test -p muda-core --test acceptance`.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use muda::analysis::{sup_vs_expectation, DisagreementReport};
use muda::checkpoint::Checkpoint;
use muda::config::{DataConfig, ExperimentConfig, NetworkConfig};
use muda::data::{decode_idx, encode_idx, read_idx_file, write_idx, IdxData, IdxDtype};
use muda::experiment::{run_experiment, ExperimentOutcome, RunOptions, SeedSource};
use muda::ndcore::{one_hot, Tensor};
use muda::selftest::gradient_suite;
use muda::uncertainty::{predictive_variance, raw_variance, DivergenceNorm, McEnsemble};
use muda::{MudaError, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = std::result::Result<String, String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_path(configs_dir().join(name)).expect("shipped config loads")
}

fn run(cfg: &ExperimentConfig, seed: u64) -> (ExperimentOutcome, Duration) {
    let opts = RunOptions {
        seed: Some((seed, SeedSource::Flag)),
        threads: 1,
    };
    let started = Instant::now();
    let outcome = run_experiment(cfg, &opts).expect("experiment runs");
    (outcome, started.elapsed())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const MOONS_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct MoonsRuns {
    runs: Vec<(ExperimentOutcome, Duration)>,
}

fn moons_runs() -> MoonsRuns {
    let cfg = load("moons.toml");
    MoonsRuns {
        runs: MOONS_SEEDS.iter().map(|&s| run(&cfg, s)).collect(),
    }
}

fn criterion_1(m: &MoonsRuns) -> Verdict {
    let (first, _) = &m.runs[0];
    let d = &first.domains;
    let c = &first.config;
    let setup_ok = [
        d.source_train.len(),
        d.source_test.len(),
        d.target_train.len(),
        d.target_test.len(),
    ] == [500; 4]
        && matches!(c.data, DataConfig::Moons { n: 1000, rotation_deg, .. } if rotation_deg == 30.0)
        && c.network == NetworkConfig::Toy
        && c.train.rho_f == 0.5
        && c.train.batch_size_source == 128
        && c.train.batch_size_target == 128;
    let so: Vec<f64> = m
        .runs
        .iter()
        .map(|(o, _)| o.summary.source_only.target.accuracy)
        .collect();
    let mu: Vec<f64> = m.runs.iter().map(|(o, _)| o.summary.muda.target.accuracy).collect();
    let slowest = m.runs.iter().map(|(_, t)| *t).max().unwrap_or_default();
    let (so_med, mu_med) = (median(&so), median(&mu));
    let gap = 100.0 * (mu_med - so_med);
    verdict(
        setup_ok && mu_med >= 0.90 && gap >= 5.0 && slowest <= Duration::from_secs(120),
        format!(
            "source-only median {so_med:.4}, MUDA median {mu_med:.4}, gap {gap:+.1} points, slowest run {:.1}s \
             (MUDA per seed {mu:?}; setup as specified: {setup_ok})",
            slowest.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let report = gradient_suite(20, 0).map_err(|e| e.to_string())?;
    let worst = report
        .by_case()
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("cases");
    verdict(
        report.max_rel_error() <= 1e-4,
        format!(
            "max relative error {:.2e} over {} checks ({} cases, worst {})",
            report.max_rel_error(),
            report.cases.len(),
            report.by_case().len(),
            worst.0
        ),
    )
}

/// Softmax of random logits; `identical` repeats the first pass.
fn random_ensemble(rng: &mut ChaCha8Rng, m: usize, n: usize, k: usize, identical: bool) -> McEnsemble {
    let scale = rng.random_range(0.1..6.0);
    let mut first = Vec::new();
    let mut data = Vec::with_capacity(m * n * k);
    for p in 0..m {
        for s in 0..n {
            let row: Vec<f64> = if identical && p > 0 {
                first[s * k..(s + 1) * k].to_vec()
            } else {
                let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-scale..scale)).collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.iter().map(|e| e / z).collect()
            };
            if p == 0 {
                first.extend_from_slice(&row);
            }
            data.extend(row);
        }
    }
    McEnsemble::new(Tensor::new(vec![m, n, k], data).unwrap()).unwrap()
}

fn random_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(2..=32),
        rng.random_range(1..=64),
        rng.random_range(2..=10),
    )
}

fn criterion_3(ensembles: &mut Vec<McEnsemble>) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, n, k) = random_dims(&mut rng);
        let e = random_ensemble(&mut rng, m, n, k, false);
        // Ordered pairs, self-pairs included.
        let mut lhs = 0.0;
        for s in 0..n {
            let mut acc = 0.0;
            for i in 0..m {
                for j in 0..m {
                    acc += e
                        .score(i, s)
                        .iter()
                        .zip(e.score(j, s))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>();
                }
            }
            lhs += acc / (m * m) as f64;
        }
        lhs /= n as f64;
        let var = raw_variance(&e);
        let rhs = 2.0 * var.data().iter().sum::<f64>() / n as f64;
        worst = worst.max((lhs - rhs).abs());
        ensembles.push(e);
    }
    verdict(
        worst <= 1e-9,
        format!("max |pairwise − 2·variance| {worst:.2e} over 100 ensembles"),
    )
}

fn criterion_4(ensembles: &mut Vec<McEnsemble>) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (m, n, k) = random_dims(&mut rng);
        let e = random_ensemble(&mut rng, m, n, k, i % 10 == 0);
        let est = predictive_variance(&e, DivergenceNorm::StdL2).map_err(|err| err.to_string())?;
        for s in 0..n {
            for c in 0..k {
                let mean = (0..m).map(|p| e.score(p, s)[c]).sum::<f64>() / m as f64;
                let var = (0..m).map(|p| (e.score(p, s)[c] - mean).powi(2)).sum::<f64>() / m as f64;
                worst = worst.max((est.variance.get2(s, c) - var).abs());
            }
        }
        ensembles.push(e);
    }
    verdict(
        worst <= 1e-12,
        format!("max |estimator − two-pass| {worst:.2e} over 50 ensembles"),
    )
}

fn criterion_5(m: &MoonsRuns, ensembles: &[McEnsemble]) -> Verdict {
    let mut reports: Vec<DisagreementReport> = ensembles.iter().map(sup_vs_expectation).collect();
    let mut trend = Vec::new();
    for (o, _) in &m.runs {
        reports.extend(o.divergence.iter().map(|d| d.report.clone()));
        reports.push(sup_vs_expectation(&o.ensemble));
        let first = o.divergence.first().map(|d| d.report.expectation).unwrap_or(f64::NAN);
        let last = o.divergence.last().map(|d| d.report.expectation).unwrap_or(f64::NAN);
        trend.push((first, last));
    }
    let violations = reports
        .iter()
        .filter(|r| r.supremum.is_nan() || r.expectation.is_nan() || r.supremum < r.expectation)
        .count();
    let decreasing = trend.iter().all(|(a, b)| b < a);
    let shown: Vec<String> = trend.iter().map(|(a, b)| format!("{a:.4}→{b:.4}")).collect();
    verdict(
        violations == 0 && decreasing,
        format!(
            "sup < exp in {violations} of {} ensembles; epoch-0→final expectation per seed [{}]",
            reports.len(),
            shown.join(", ")
        ),
    )
}

fn criterion_6(m: &MoonsRuns) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (o, _) in &m.runs {
        let l = o.muda.l_div_series();
        let w = (l.len() / 10).max(1);
        let head = l[..w].iter().sum::<f64>() / w as f64;
        let tail = l[l.len() - w..].iter().sum::<f64>() / w as f64;
        let min_src = o
            .muda
            .records
            .iter()
            .filter_map(|r| r.src_acc)
            .fold(f64::INFINITY, f64::min);
        ok &= tail < head && min_src >= 0.95 && o.muda.records.iter().all(|r| r.src_acc.is_some());
        parts.push(format!("{head:.4}→{tail:.4} (min src {min_src:.3})"));
    }
    verdict(ok, format!("L_div first→last 10% per seed: {}", parts.join(", ")))
}

fn criterion_7() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = configs_dir().join("moons.toml");
    let train = |name: &str, threads: &str| -> std::result::Result<PathBuf, String> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_muda"))
            .args(["train", "--seed", "7", "--threads", threads, "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .env_remove("MUDA_SEED")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!(
                "muda train failed: {}",
                String::from_utf8_lossy(&status.stderr)
            ));
        }
        Ok(out)
    };
    let runs = [train("a", "1")?, train("b", "1")?, train("c", "4")?];
    let files = [
        "metrics.csv",
        "metrics_source_only.csv",
        "pretrain.csv",
        "divergence.csv",
    ];
    let mut differing = Vec::new();
    for f in files {
        let bytes: Vec<Vec<u8>> = runs
            .iter()
            .map(|r| std::fs::read(r.join(f)).unwrap_or_default())
            .collect();
        if bytes[0].is_empty() || bytes[0] != bytes[1] || bytes[0] != bytes[2] {
            differing.push(f);
        }
    }
    verdict(
        differing.is_empty(),
        format!(
            "3 CLI runs (threads 1, 1, 4), {} CSVs compared, differing: {differing:?}",
            files.len()
        ),
    )
}

fn criterion_8() -> Verdict {
    let mut cfg = load("moons.toml");
    cfg.train.rho_f = 0.0;
    cfg.train.rho_c = 0.0;
    let (o, _) = run(&cfg, 11);
    let zero_div = o.muda.records.iter().all(|r| r.l_div == 0.0);
    let same_final = Checkpoint::capture(&o.muda_net, 0).tensors == Checkpoint::capture(&o.source_only_net, 0).tensors;
    let same_csv = o.muda.metrics_csv(false) == o.source_only.metrics_csv(false);

    // Step by step from the pretrained state on identical batches.
    let trainer = Trainer::new(o.config.train.clone(), 1).map_err(|e| e.to_string())?;
    let (mut a, mut b) = (o.pretrained_net.clone(), o.pretrained_net.clone());
    for net in [&mut a, &mut b] {
        net.set_dropout_rates(0.0, 0.0).map_err(|e| e.to_string())?;
    }
    let (mut sa, mut sb) = (
        trainer.adapt_state().map_err(|e| e.to_string())?,
        trainer.adapt_state().map_err(|e| e.to_string())?,
    );
    let src = &o.domains.source_train;
    let tgt = o.domains.target_train.inputs();
    let labels = src.require_labels().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let steps = 200;
    let mut lockstep = || -> std::result::Result<Option<usize>, MudaError> {
        for t in 0..steps {
            let si: Vec<usize> = (0..64).map(|_| rng.random_range(0..src.len())).collect();
            let ti: Vec<usize> = (0..64).map(|_| rng.random_range(0..tgt.rows())).collect();
            let xs = src.inputs().select_rows(&si);
            let ys = one_hot(&si.iter().map(|&i| labels[i]).collect::<Vec<_>>(), 2)?;
            let xt = tgt.select_rows(&ti);
            trainer.c_update(&mut a, &mut sa, &xs, &ys)?;
            trainer.c_update(&mut b, &mut sb, &xs, &ys)?;
            let (out, _) = trainer.f_update(&mut a, &mut sa, &xs, &ys, Some(&xt))?;
            trainer.f_update(&mut b, &mut sb, &xs, &ys, None)?;
            if out.l_div != 0.0 || Checkpoint::capture(&a, 0).tensors != Checkpoint::capture(&b, 0).tensors {
                return Ok(Some(t));
            }
        }
        Ok(None)
    };
    let diverged_at = lockstep().map_err(|e| e.to_string())?;
    verdict(
        zero_div && same_final && same_csv && diverged_at.is_none(),
        format!(
            "L_div ≡ 0: {zero_div}; identical final parameters: {same_final}; identical metrics: {same_csv}; \
             {steps} lockstep updates, first divergence: {diverged_at:?}"
        ),
    )
}

fn criterion_9() -> Verdict {
    let cfg = load("blobs.toml");
    let shifts = match &cfg.data {
        DataConfig::Blobs { source_shifts, .. } if source_shifts.len() == 2 => source_shifts.clone(),
        _ => return Err("blobs.toml must list two source shifts".into()),
    };
    let accuracy = |cfg: &ExperimentConfig| -> Vec<f64> {
        MOONS_SEEDS
            .iter()
            .map(|&s| run(cfg, s).0.summary.muda.target.accuracy)
            .collect()
    };
    let combined = median(&accuracy(&cfg));
    let mut singles = Vec::new();
    for shift in &shifts {
        let mut single = cfg.clone();
        if let DataConfig::Blobs { source_shifts, .. } = &mut single.data {
            *source_shifts = vec![shift.clone()];
        }
        singles.push(median(&accuracy(&single)));
    }
    let best = singles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    verdict(
        combined >= best - 0.02,
        format!(
            "median MUDA target accuracy over {} seeds: combined {combined:.4}, single sources {singles:.4?}, \
             margin {:+.1} points",
            MOONS_SEEDS.len(),
            100.0 * (combined - best)
        ),
    )
}

fn criterion_10() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut files = Vec::new();
    for shape in [vec![7usize], vec![3, 4, 5], vec![2, 28, 28], vec![1, 1]] {
        let count: usize = shape.iter().product();
        let bytes: Vec<f64> = (0..count).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect();
        files.push(IdxData {
            dtype: IdxDtype::U8,
            tensor: Tensor::new(shape.clone(), bytes).unwrap(),
        });
        let floats: Vec<f64> = (0..count).map(|_| rng.random_range(-1e3f32..1e3f32) as f64).collect();
        files.push(IdxData {
            dtype: IdxDtype::F32,
            tensor: Tensor::new(shape, floats).unwrap(),
        });
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut round_trips = 0;
    for (i, f) in files.iter().enumerate() {
        let bytes = encode_idx(f).map_err(|e| e.to_string())?;
        let decoded = decode_idx(&bytes).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("f{i}.idx"));
        write_idx(&path, &decoded).map_err(|e| e.to_string())?;
        let on_disk = std::fs::read(&path).map_err(|e| e.to_string())?;
        if decoded == *f
            && encode_idx(&decoded).ok() == Some(bytes.clone())
            && on_disk == bytes
            && read_idx_file(&path).ok().as_ref() == Some(f)
        {
            round_trips += 1;
        }
    }

    // [3, 4, 5] u8: 16-byte header, 60-byte payload.
    let good = encode_idx(&files[2]).unwrap();
    let mut cases: Vec<(&str, Vec<u8>, usize)> = Vec::new();
    let mut b = good.clone();
    b[0] = 0x01;
    cases.push(("bad magic", b, 0));
    let mut b = good.clone();
    b[2] = 0x0C;
    cases.push(("unsupported dtype", b, 2));
    let mut b = good.clone();
    b[8..12].copy_from_slice(&0u32.to_be_bytes());
    cases.push(("zero extent", b, 8));
    cases.push(("truncated header", good[..10].to_vec(), 10));
    cases.push(("truncated payload", good[..good.len() - 5].to_vec(), good.len() - 5));
    let mut b = good.clone();
    b.extend_from_slice(&[0, 0]);
    cases.push(("trailing bytes", b, 76));
    let mut wrong = Vec::new();
    for (name, bytes, expected) in &cases {
        match decode_idx(bytes) {
            Err(MudaError::Parse { offset, .. }) if offset == *expected => {}
            other => wrong.push(format!("{name}: {other:?}")),
        }
    }
    verdict(
        round_trips == files.len() && wrong.is_empty(),
        format!(
            "{round_trips}/{} byte-exact round trips; {}/{} corrupted files at documented offsets {wrong:?}",
            files.len(),
            cases.len() - wrong.len(),
            cases.len()
        ),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let moons = moons_runs();
    let mut ensembles = Vec::new();
    let results: Vec<(u32, &str, Verdict)> = vec![
        (1, "two-moons adaptation", criterion_1(&moons)),
        (2, "gradient correctness", criterion_2()),
        (3, "pairwise identity", criterion_3(&mut ensembles)),
        (4, "estimator vs two-pass oracle", criterion_4(&mut ensembles)),
        (5, "divergence ordering", criterion_5(&moons, &ensembles)),
        (6, "learning curve", criterion_6(&moons)),
        (7, "determinism", criterion_7()),
        (8, "degenerate-config reduction", criterion_8()),
        (9, "source combine", criterion_9()),
        (10, "IDX parser", criterion_10()),
    ];
    let mut failed = 0;
    for (n, name, v) in &results {
        match v {
            Ok(detail) => println!("[PASS] criterion {n} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {n} ({name}): {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
