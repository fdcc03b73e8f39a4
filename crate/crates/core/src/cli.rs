//! The `ceat` command line.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 bad config, usage or
//! missing/corrupt artifact, 3 numeric abort during training, 4 gradient check
//! outside tolerance.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attacks::{linf_distance, AttackKind, AttackSpec, AttackTarget};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_grid, adversarial_inputs, blackbox_eval, ensemble_accuracy, evaluate, transfer_matrix, write_ablation,
    write_report, EvalReport, ReportMeta,
};
use crate::gradcheck::run_suite;
use crate::nn::Model;
use crate::trainer::{train, CeatConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ceat", version, about = "Collaborative ensemble adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a setting, e.g. `--set train.mu=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model seed (overrides `model.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ArtifactArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory holding `member_<i>.ckpt`; defaults to the output directory.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an ensemble, write checkpoints, the epoch log and a final report.
    Train(RunArgs),
    /// Evaluate saved checkpoints against the configured attack battery.
    Eval(ArtifactArgs),
    /// Run one attack against saved checkpoints.
    Attack {
        #[command(flatten)]
        args: ArtifactArgs,
        /// Attack family (fgsm, pgd, mim, cw).
        #[arg(long, default_value = "pgd")]
        attack: String,
    },
    /// Member-to-member transferability matrix of saved checkpoints.
    Transfer(ArtifactArgs),
    /// Train the five loss-ablation rows from a shared initialisation.
    Ablate(RunArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Where to write `gradcheck.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Maps an error to the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } => EXIT_NUMERIC,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_CONFIG,
        Error::Io(_) => EXIT_FAILURE,
        Error::Config(_) | Error::Usage(_) | Error::Format(_) | Error::Dimension(_) | Error::Input(_) | Error::Json(_) => {
            EXIT_CONFIG
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train(args) => cmd_train(&args).map(|_| EXIT_OK),
        Command::Eval(args) => cmd_eval(&args).map(|_| EXIT_OK),
        Command::Attack { args, attack } => cmd_attack(&args, attack.parse()?).map(|_| EXIT_OK),
        Command::Transfer(args) => cmd_transfer(&args).map(|_| EXIT_OK),
        Command::Ablate(args) => cmd_ablate(&args).map(|_| EXIT_OK),
        Command::Gradcheck { trials, seed, step, tolerance, out } => cmd_gradcheck(trials, seed, step, tolerance, out.as_deref()),
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("model.seed={seed}"));
    }
    let mut cfg = RunConfig::load(&args.config, &overrides)?;
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    fs::create_dir_all(&cfg.output.dir)?;
    Ok(cfg)
}

pub fn checkpoint_path(dir: &Path, member: usize) -> PathBuf {
    dir.join(format!("member_{member}.ckpt"))
}

/// Loads `member_0.ckpt ..` for the configured ensemble size.
pub fn load_members(dir: &Path, count: usize) -> Result<Vec<Model>> {
    (0..count)
        .map(|i| {
            let path = checkpoint_path(dir, i);
            Model::load_checkpoint(&path).map_err(|e| match e {
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(std::io::Error::new(
                    io.kind(),
                    format!("missing checkpoint {}", path.display()),
                )),
                Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
                other => other,
            })
        })
        .collect()
}

fn fresh_ensemble(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<Ensemble> {
    Ensemble::init(cfg.model.arch, cfg.model.members, ds.sample_shape(), ds.num_classes(), seed, &cfg.sgd)
}

fn emit_report(cfg: &RunConfig, report: &EvalReport, stem: &str) -> Result<()> {
    for format in &cfg.output.formats {
        write_report(report, cfg.output.dir.join(format!("{stem}.{}", format.extension())), *format)?;
    }
    Ok(())
}

fn meta(cfg: &RunConfig, train: &CeatConfig, started: Instant) -> ReportMeta {
    let mut m = ReportMeta::new(cfg.model.seed, cfg.hash.clone(), train);
    m.elapsed_seconds = started.elapsed().as_secs_f64();
    m
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config(args)?;
    let (train_set, test_set) = cfg.load_datasets()?;
    let mut ens = fresh_ensemble(&cfg, &train_set, cfg.model.seed)?;
    let mut log = BufWriter::new(File::create(cfg.output.dir.join("train_log.jsonl"))?);
    let result = train(&mut ens, &train_set, &cfg.train, |s| {
        writeln!(log, "{}", s.to_json_line()?)?;
        log.flush()?;
        eprintln!(
            "epoch {:>3}  l_ce {:.4}  e^D mean {:.3}  adv acc {:.3}",
            s.epoch,
            s.mean_l_ce(),
            s.e_d_mean,
            s.adv_train_acc
        );
        Ok(())
    });
    result?;
    for (i, m) in ens.members().iter().enumerate() {
        m.save_checkpoint(checkpoint_path(&cfg.output.dir, i))?;
    }
    let mut report = evaluate(ens.members(), &test_set, &cfg.eval.battery, cfg.eval.seed)?;
    report.meta = meta(&cfg, &cfg.train, started);
    emit_report(&cfg, &report, "report")?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn artifact_setup(args: &ArtifactArgs) -> Result<(RunConfig, Dataset, Vec<Model>)> {
    let cfg = load_config(&args.run)?;
    let dir = args.checkpoints.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let members = load_members(&dir, cfg.model.members)?;
    let (_, test) = cfg.load_datasets()?;
    Ok((cfg, test, members))
}

pub fn cmd_eval(args: &ArtifactArgs) -> Result<()> {
    let started = Instant::now();
    let (cfg, test, members) = artifact_setup(args)?;
    let mut report = evaluate(&members, &test, &cfg.eval.battery, cfg.eval.seed)?;
    if cfg.eval.blackbox {
        let (train_set, _) = cfg.load_datasets()?;
        let mut surrogate = fresh_ensemble(&cfg, &train_set, cfg.eval.surrogate_seed)?;
        let surrogate_cfg = CeatConfig {
            seed: cfg.eval.surrogate_seed,
            variant: cfg.eval.surrogate_variant,
            ..cfg.train.clone()
        };
        train(&mut surrogate, &train_set, &surrogate_cfg, |_| Ok(()))?;
        report.blackbox = Some(blackbox_eval(&members, surrogate.members(), &test, &cfg.eval.transfer_attack, cfg.eval.seed)?);
    }
    report.meta = meta(&cfg, &cfg.train, started);
    emit_report(&cfg, &report, "eval_report")?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct AttackReport {
    attack: String,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    clean_acc: f64,
    robust_acc: f64,
    success_rate: f64,
    max_linf: f64,
    config_hash: String,
}

pub fn cmd_attack(args: &ArtifactArgs, kind: AttackKind) -> Result<()> {
    let (cfg, test, members) = artifact_setup(args)?;
    let spec = cfg
        .eval
        .battery
        .iter()
        .find(|s| s.kind == kind)
        .cloned()
        .unwrap_or_else(|| AttackSpec::evaluation(kind))
        .with_target(AttackTarget::Ensemble);
    let adv = adversarial_inputs(&members, &test, &spec, cfg.eval.seed)?;
    let robust = ensemble_accuracy(&members, &adv, test.labels())?;
    let report = AttackReport {
        attack: kind.to_string(),
        epsilon: spec.epsilon,
        alpha: spec.alpha,
        steps: spec.steps,
        clean_acc: ensemble_accuracy(&members, test.inputs(), test.labels())?,
        robust_acc: robust,
        success_rate: 1.0 - robust,
        max_linf: linf_distance(&adv, test.inputs()),
        config_hash: cfg.hash.clone(),
    };
    write_json(&cfg.output.dir.join(format!("attack_{kind}.json")), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn cmd_transfer(args: &ArtifactArgs) -> Result<()> {
    let started = Instant::now();
    let (cfg, test, members) = artifact_setup(args)?;
    let matrix = transfer_matrix(&members, &test, &cfg.eval.transfer_attack, cfg.eval.seed)?;
    let report = EvalReport {
        meta: meta(&cfg, &cfg.train, started),
        clean_acc: ensemble_accuracy(&members, test.inputs(), test.labels())?,
        transfer: Some(matrix),
        ..EvalReport::default()
    };
    write_json(&cfg.output.dir.join("transfer.json"), &report)?;
    println!("{}", serde_json::to_string(&report.transfer)?);
    Ok(())
}

pub fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (train_set, test_set) = cfg.load_datasets()?;
    let init = fresh_ensemble(&cfg, &train_set, cfg.model.seed)?;
    let rows = ablation_grid(&init, &train_set, &test_set, &cfg.train, cfg.eval.seed)?;
    for format in &cfg.output.formats {
        write_ablation(&rows, cfg.output.dir.join(format!("ablation.{}", format.extension())), *format)?;
    }
    println!("{}", serde_json::to_string(&rows)?);
    Ok(())
}

pub fn cmd_gradcheck(trials: usize, seed: u64, step: f64, tolerance: f64, out: Option<&Path>) -> Result<i32> {
    let report = run_suite(trials, seed, step, tolerance)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    println!(
        "gradcheck: {} cases, max relative error {:.3e}, tolerance {:.1e}: {}",
        report.cases.len(),
        report.max_rel_error,
        tolerance,
        if report.passed { "pass" } else { "FAIL" }
    );
    if report.passed {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: gradient check exceeded tolerance ({:.3e} >= {:.1e})", report.max_rel_error, tolerance);
        Ok(EXIT_GRADCHECK)
    }
}
