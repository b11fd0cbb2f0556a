use std::path::Path;
use std::process::{Command, Output};

fn muda(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_muda"));
    cmd.args(args).env_remove("MUDA_SEED");
    if let Some(s) = env_seed {
        cmd.env("MUDA_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        r#"
name = "small"
[data]
kind = "moons"
n = 200
[train]
pretrain_epochs = 5
adapt_epochs = 4
batch_size_source = 32
batch_size_target = 32
seed = 3
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selftest_passes() {
    let o = muda(&["selftest", "--instances", "3"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max gradient-check error"));
}

#[test]
fn missing_config_exits_2() {
    let o = muda(&["train", "--config", "/does/not/exist.toml"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn invalid_config_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"x\"\n[data]\nkind = \"moons\"\n[train]\nrho_f = 1.5\n").unwrap();
    let o = muda(&["train", "--config", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.rho_f"), "{}", stderr(&o));
}

#[test]
fn bad_env_seed_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = muda(
        &[
            "train",
            "--config",
            &cfg,
            "--out",
            dir.path().join("r").to_str().unwrap(),
        ],
        Some("abc"),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_analyze_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str, seed: Option<&str>, env: Option<&str>| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", &cfg, "--out", out.to_str().unwrap()];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        let o = muda(&args, env);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let a = run("a", Some("5"), None);
    let b = run("b", None, Some("5"));
    let c = run("c", Some("5"), Some("9"));
    for f in ["metrics.csv", "metrics_source_only.csv", "divergence.csv"] {
        let first = std::fs::read(a.join(f)).unwrap();
        assert_eq!(first, std::fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(first, std::fs::read(c.join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["seed_source"], "environment");
    assert!(summary["muda"]["target"]["accuracy"].is_number());
    assert!(summary["source_only"]["target"]["accuracy"].is_number());

    let header = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(header.starts_with("epoch,l_cls,l_div,src_acc,tgt_acc,wall_ms\n"));
    assert_eq!(header.lines().count(), 5);

    let ckpt = a.join("checkpoints/muda.json");
    let data = a.join("data/target_test.bin");
    let o = muda(
        &[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["accuracy"], summary["muda"]["target"]["accuracy"]);

    let report = dir.path().join("report.csv");
    let ens = a.join("ensemble.bin");
    let o = muda(
        &[
            "analyze",
            "--ensemble",
            ens.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(report).unwrap();
    assert!(csv.starts_with("epoch,sup,exp,std\n0,"));

    // Re-running the echoed config reproduces the run.
    let echo = a.join("config.json");
    let d = dir.path().join("d");
    let o = muda(
        &[
            "train",
            "--config",
            echo.to_str().unwrap(),
            "--out",
            d.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(d.join("metrics.csv")).unwrap()
    );
}

#[test]
fn gen_data_writes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["moons", "blobs"] {
        let out = dir.path().join(kind);
        let o = muda(
            &[
                "gen-data",
                "--kind",
                kind,
                "--n",
                "100",
                "--seed",
                "2",
                "--out",
                out.to_str().unwrap(),
            ],
            None,
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let src = muda::dumps::read_dataset(out.join("source.bin")).unwrap();
        let tgt = muda::dumps::read_dataset(out.join("target.bin")).unwrap();
        assert_eq!((src.len(), tgt.len()), (100, 100));
    }
    let o = muda(&["gen-data", "--kind", "spirals", "--out", "x"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_on_corrupt_dump_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a dump").unwrap();
    let o = muda(
        &["analyze", "--ensemble", junk.to_str().unwrap(), "--out", "/dev/null"],
        None,
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error:"));
}
