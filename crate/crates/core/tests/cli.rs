use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SPIRALS: &str = "\
[dataset]
kind = spirals
n_train = 64
n_test = 48
noise = 0.05

[model]
arch = mlp
members = 3
seed = 11

[train]
epochs = 2
batch_size = 16
steps = 3
alpha = 0.02

[eval]
attacks = pgd, fgsm
steps = 5

[output]
formats = json, csv
";

fn ceat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ceat")).args(args).output().expect("spawn ceat")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    ceat(&args)
}

fn without_timestamps(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let meta = v["meta"].as_object_mut().unwrap();
    meta.remove("created_unix");
    meta.remove("elapsed_seconds");
    v
}

#[test]
fn train_then_evaluate_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPIRALS);
    let out = dir.path().join("run");
    let o = train(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for i in 0..3 {
        assert!(out.join(format!("member_{i}.ckpt")).is_file());
    }
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["members"].as_array().unwrap().len(), 3);
    assert!(first["partition"].as_array().unwrap().len() == 4);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["robust"]["pgd"].as_f64().unwrap() <= 1.0);
    assert_eq!(report["meta"]["seed"], 11);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 2);

    let c = cfg.to_str().unwrap();
    let o = ceat(&["eval", "--config", c, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("eval_report.json").is_file());

    let o = ceat(&["transfer", "--config", c, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t: Value = serde_json::from_str(&fs::read_to_string(out.join("transfer.json")).unwrap()).unwrap();
    let m = t["transfer"].as_array().unwrap();
    assert_eq!(m.len(), 3);
    assert!(m.iter().all(|r| r.as_array().unwrap().len() == 3));

    let o = ceat(&["attack", "--config", c, "--out", out.to_str().unwrap(), "--attack", "mim"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a: Value = serde_json::from_str(&fs::read_to_string(out.join("attack_mim.json")).unwrap()).unwrap();
    assert!(a["max_linf"].as_f64().unwrap() <= 0.031 + 1e-12);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPIRALS);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(train(&cfg, &a, &[]).status.code(), Some(0));
    assert_eq!(train(&cfg, &b, &[]).status.code(), Some(0));
    for f in ["member_0.ckpt", "member_1.ckpt", "member_2.ckpt", "train_log.jsonl", "report.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(without_timestamps(&a.join("report.json")), without_timestamps(&b.join("report.json")));

    let c = dir.path().join("c");
    assert_eq!(train(&cfg, &c, &["--seed", "12"]).status.code(), Some(0));
    assert_ne!(fs::read(a.join("member_0.ckpt")).unwrap(), fs::read(c.join("member_0.ckpt")).unwrap());
}

#[test]
fn config_errors_exit_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), &format!("{SPIRALS}\n[train]\nlambda = -1\n"));
    let o = train(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error:") && err.contains("lambda"), "{err}");

    let cfg = write_config(dir.path(), SPIRALS);
    let o = train(&cfg, &out, &["--set", "train.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ceat(&["train", "--config", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = ceat(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_or_corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPIRALS);
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = ceat(&["eval", "--config", cfg.to_str().unwrap(), "--out", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("member_0.ckpt"));

    for i in 0..3 {
        fs::write(empty.join(format!("member_{i}.ckpt")), b"CEAT garbage").unwrap();
    }
    let o = ceat(&["eval", "--config", cfg.to_str().unwrap(), "--out", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPIRALS);
    let out = dir.path().join("o");
    let o = train(&cfg, &out, &["--set", "train.learning_rate=1e6", "--set", "train.epochs=20"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error:") && line.contains("batch") && line.contains("member"), "{err}");
}

#[test]
fn gradcheck_passes_and_reports_breach() {
    let dir = tempfile::tempdir().unwrap();
    let o = ceat(&["gradcheck", "--trials", "10", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(r["cases"].as_array().unwrap().len(), 20);
    let o = ceat(&["gradcheck", "--trials", "2", "--tolerance", "1e-300"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn ablate_writes_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPIRALS);
    let out = dir.path().join("ab");
    let o = ceat(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "train.epochs=1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("1,false,false,false"));
    assert!(rows[4].starts_with("5,true,true,true"));
}
