//! Robustness evaluation and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackKind, AttackSpec, AttackTarget};
use crate::data::Dataset;
use crate::ensemble::{ensemble_predict, mix64, model_predict, Ensemble};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;
use crate::trainer::{train, CeatConfig, LossTerms, Variant};

/// Samples attacked per call; keeps graphs small on large test sets.
pub const EVAL_CHUNK: usize = 250;

pub const TRANSFER_ORIENTATION: &str = "row = generating member, column = attacked member";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub variant: String,
    pub lambda: f64,
    pub mu: f64,
    pub transfer_orientation: String,
    pub created_unix: u64,
    pub elapsed_seconds: f64,
}

impl ReportMeta {
    pub fn new(seed: u64, config_hash: impl Into<String>, cfg: &CeatConfig) -> Self {
        Self {
            seed,
            config_hash: config_hash.into(),
            variant: cfg.variant.to_string(),
            lambda: cfg.lambda,
            mu: cfg.mu,
            transfer_orientation: TRANSFER_ORIENTATION.to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_seconds: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub clean_acc: f64,
    /// Attack name → ensemble accuracy on inputs crafted against the ensemble.
    pub robust: BTreeMap<String, f64>,
    pub transfer: Option<Vec<Vec<f64>>>,
    pub blackbox: Option<f64>,
}

fn check_compatible(members: &[Model], ds: &Dataset) -> Result<()> {
    let first = members.first().ok_or_else(|| Error::input("no models to evaluate"))?;
    if ds.sample_shape() != first.input_shape() {
        return Err(Error::dim(format!(
            "dataset samples {:?} do not match model input {:?}",
            ds.sample_shape(),
            first.input_shape()
        )));
    }
    if ds.num_classes() != first.num_classes() {
        return Err(Error::dim(format!(
            "dataset has {} classes, models {}",
            ds.num_classes(),
            first.num_classes()
        )));
    }
    Ok(())
}

fn chunks(n: usize) -> impl Iterator<Item = (usize, Vec<usize>)> {
    (0..n.div_ceil(EVAL_CHUNK)).map(move |c| (c, (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n)).collect()))
}

/// Adversarial copy of the whole dataset, crafted chunk by chunk.
pub fn adversarial_inputs(members: &[Model], ds: &Dataset, spec: &AttackSpec, seed: u64) -> Result<Tensor> {
    check_compatible(members, ds)?;
    let mut values = Vec::with_capacity(ds.inputs().len());
    for (c, idx) in chunks(ds.len()) {
        let x = ds.inputs().select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
        let adv = run_attack(members, &x, &y, spec, mix64(seed ^ c as u64))?;
        values.extend_from_slice(adv.x_adv.values());
    }
    Tensor::new(ds.inputs().shape().to_vec(), values)
}

fn fraction_correct(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}

pub fn ensemble_accuracy(members: &[Model], x: &Tensor, y: &[usize]) -> Result<f64> {
    Ok(fraction_correct(&ensemble_predict(members, x)?, y))
}

pub fn model_accuracy(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    Ok(fraction_correct(&model_predict(model, x)?, y))
}

/// Clean accuracy plus one robust accuracy per attack, all attacks aimed at
/// the averaged ensemble.
pub fn evaluate(members: &[Model], ds: &Dataset, battery: &[AttackSpec], seed: u64) -> Result<EvalReport> {
    check_compatible(members, ds)?;
    let mut report = EvalReport {
        clean_acc: ensemble_accuracy(members, ds.inputs(), ds.labels())?,
        ..EvalReport::default()
    };
    for spec in battery {
        let spec = spec.clone().with_target(AttackTarget::Ensemble);
        let adv = adversarial_inputs(members, ds, &spec, seed)?;
        report
            .robust
            .insert(spec.kind.name().to_string(), ensemble_accuracy(members, &adv, ds.labels())?);
    }
    Ok(report)
}

/// Entry `(i, j)`: fraction of samples member `j` misclassifies on inputs
/// crafted against member `i`.
pub fn transfer_matrix(members: &[Model], ds: &Dataset, spec: &AttackSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    check_compatible(members, ds)?;
    let mut rows = Vec::with_capacity(members.len());
    for i in 0..members.len() {
        let adv = adversarial_inputs(members, ds, &spec.clone().with_target(AttackTarget::Member(i)), seed)?;
        let row = members
            .iter()
            .map(|m| model_accuracy(m, &adv, ds.labels()).map(|a| 1.0 - a))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn mean_off_diagonal(matrix: &[Vec<f64>]) -> f64 {
    let n = matrix.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| matrix[i][j]).sum();
    total / (n * (n - 1)) as f64
}

/// Defender accuracy on inputs crafted against a separately trained
/// surrogate.
pub fn blackbox_eval(defender: &[Model], surrogate: &[Model], ds: &Dataset, spec: &AttackSpec, seed: u64) -> Result<f64> {
    if std::ptr::eq(defender, surrogate) {
        return Err(Error::usage("surrogate and defender are the same ensemble"));
    }
    let same_params = defender.len() == surrogate.len()
        && defender.iter().zip(surrogate).all(|(a, b)| a.checksum() == b.checksum());
    if same_params {
        return Err(Error::usage("surrogate shares its parameters with the defender"));
    }
    check_compatible(surrogate, ds)?;
    let adv = adversarial_inputs(surrogate, ds, &spec.clone().with_target(AttackTarget::Ensemble), seed)?;
    ensemble_accuracy(defender, &adv, ds.labels())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub use_ed: bool,
    pub use_ladv: bool,
    pub use_lnat: bool,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub mim_acc: f64,
}

/// `(e^D, L_adv, L_nat)` switches of the five ablation rows.
pub const ABLATION_FLAGS: [(bool, bool, bool); 5] = [
    (false, false, false),
    (false, true, false),
    (true, true, false),
    (false, true, true),
    (true, true, true),
];

/// Training config for one ablation row; the all-off row is vanilla EAT.
pub fn ablation_config(base: &CeatConfig, flags: (bool, bool, bool)) -> CeatConfig {
    let (disparity, adv, nat) = flags;
    if !(disparity || adv || nat) {
        return CeatConfig { variant: Variant::VanillaEat, terms: LossTerms::NONE, ..base.clone() };
    }
    CeatConfig { variant: Variant::Ceat, terms: LossTerms { disparity, adv, nat }, ..base.clone() }
}

/// Trains one copy of `init` per row (shared seed) and evaluates clean, PGD
/// and MIM accuracy on `test`.
pub fn ablation_grid(init: &Ensemble, train_set: &Dataset, test: &Dataset, base: &CeatConfig, eval_seed: u64) -> Result<Vec<AblationRow>> {
    let battery = [AttackSpec::evaluation(AttackKind::Pgd), AttackSpec::evaluation(AttackKind::Mim)];
    ABLATION_FLAGS
        .iter()
        .enumerate()
        .map(|(i, &flags)| {
            let mut ens = init.clone();
            train(&mut ens, train_set, &ablation_config(base, flags), |_| Ok(()))?;
            let report = evaluate(ens.members(), test, &battery, eval_seed)?;
            Ok(AblationRow {
                row: i + 1,
                use_ed: flags.0,
                use_ladv: flags.1,
                use_lnat: flags.2,
                clean_acc: report.clean_acc,
                pgd_acc: report.robust["pgd"],
                mim_acc: report.robust["mim"],
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::config(format!("unknown report format `{other}` (json, csv)"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

pub const REPORT_CSV_HEADER: &str = "metric,accuracy";
pub const ABLATION_CSV_HEADER: &str = "row,use_ed,use_ladv,use_lnat,clean_acc,pgd_acc,mim_acc";

/// JSON: the [`EvalReport`] fields as serialised. CSV: `metric,accuracy`
/// with a `clean` row followed by one row per attack.
pub fn write_report(report: &EvalReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
        ReportFormat::Csv => {
            let mut s = format!("{REPORT_CSV_HEADER}\nclean,{}\n", report.clean_acc);
            for (name, acc) in &report.robust {
                s.push_str(&format!("{name},{acc}\n"));
            }
            s
        }
    };
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_ablation(rows: &[AblationRow], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(rows)? + "\n",
        ReportFormat::Csv => {
            let mut s = format!("{ABLATION_CSV_HEADER}\n");
            for r in rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.row, r.use_ed, r.use_ladv, r.use_lnat, r.clean_acc, r.pgd_acc, r.mim_acc
                ));
            }
            s
        }
    };
    fs::write(path, text)?;
    Ok(())
}
