//! Run configuration: `[section]` headers and `key = value` lines, with
//! `section.key=value` overrides applied last.
//!
//! ```text
//! [dataset]
//! kind = spirals
//! [model]
//! arch = mlp
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::attacks::{AttackKind, AttackSpec};
use crate::data::{load_csv, load_idx, synth_digits, synth_spirals, Dataset, DigitStyle};
use crate::ensemble::SgdSettings;
use crate::error::{Error, Result};
use crate::eval::ReportFormat;
use crate::nn::{proportional_schedule, Arch};
use crate::trainer::{CeatConfig, LossTerms, Variant};

#[derive(Clone, Debug, PartialEq, Eq)]
enum Origin {
    Line(usize),
    Override(String),
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Override(s) => write!(f, "override `{s}`"),
            Origin::Default => f.write_str("default"),
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    (
        "dataset",
        &[
            "kind", "seed", "n_train", "n_test", "classes", "noise", "side", "jitter", "rotation", "pixel_noise",
            "train_images", "train_labels", "test_images", "test_labels", "train_csv", "test_csv",
        ],
    ),
    ("model", &["arch", "members", "seed"]),
    (
        "train",
        &[
            "variant", "lambda", "mu", "epochs", "batch_size", "learning_rate", "momentum", "lr_schedule", "clip_norm", "attack",
            "epsilon", "alpha", "steps", "random_start", "use_ed", "use_ladv", "use_lnat",
        ],
    ),
    (
        "eval",
        &["attacks", "epsilon", "alpha", "steps", "seed", "transfer_attack", "blackbox", "surrogate_seed", "surrogate_variant"],
    ),
    ("output", &["dir", "formats"]),
];

const DEFAULT_CLIP_NORM: Option<f64> = Some(5.0);

const REQUIRED: &[(&str, &str)] = &[("dataset", "kind"), ("model", "arch")];

/// Raw `section.key → value` pairs remembering where each came from.
#[derive(Clone, Debug, Default)]
struct RawConfig {
    entries: BTreeMap<(String, String), (String, Origin)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {lineno}: unterminated section header")))?
                    .trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::config(format!("line {lineno}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {lineno}: expected `key = value`")))?;
            let sec = section
                .clone()
                .ok_or_else(|| Error::config(format!("line {lineno}: key outside any [section]")))?;
            raw.insert(&sec, key.trim(), value.trim(), Origin::Line(lineno))?;
        }
        Ok(raw)
    }

    fn insert(&mut self, section: &str, key: &str, value: &str, origin: Origin) -> Result<()> {
        let known = KEYS
            .iter()
            .find(|(s, _)| *s == section)
            .ok_or_else(|| Error::config(format!("{origin}: unknown section `{section}`")))?;
        if !known.1.contains(&key) {
            return Err(Error::config(format!("{origin}: unknown key `{section}.{key}`")));
        }
        self.entries.insert((section.to_string(), key.to_string()), (value.to_string(), origin));
        Ok(())
    }

    fn apply_override(&mut self, spec: &str) -> Result<()> {
        let origin = Origin::Override(spec.to_string());
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("{origin}: expected section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::config(format!("{origin}: expected section.key=value")))?;
        self.insert(section, key, value.trim(), origin)
    }

    fn get(&self, section: &str, key: &str) -> Option<&(String, Origin)> {
        self.entries.get(&(section.to_string(), key.to_string()))
    }

    fn parse_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some((v, origin)) => v.parse::<T>().map_err(|e| {
                Error::config(format!("{origin}: `{section}.{key}` has invalid value `{v}`: {e}"))
            }),
        }
    }

    fn optional_or(&self, section: &str, key: &str, default: Option<f64>) -> Result<Option<f64>> {
        match self.get(section, key) {
            Some((v, _)) if v == "none" => Ok(None),
            Some(_) => self.parse_or(section, key, 0.0).map(Some),
            None => Ok(default),
        }
    }

    fn string_or(&self, section: &str, key: &str, default: &str) -> String {
        self.get(section, key).map(|(v, _)| v.clone()).unwrap_or_else(|| default.to_string())
    }

    fn required(&self, section: &str, key: &str) -> Result<&(String, Origin)> {
        self.get(section, key)
            .ok_or_else(|| Error::config(format!("missing required key `{section}.{key}`")))
    }

    fn origin(&self, section: &str, key: &str) -> Origin {
        self.get(section, key).map(|(_, o)| o.clone()).unwrap_or(Origin::Default)
    }

    /// Sorted `section.key=value` lines; the basis of the config hash.
    fn canonical(&self) -> String {
        self.entries
            .iter()
            .map(|((s, k), (v, _))| format!("{s}.{k}={v}\n"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Digits { n_train: usize, n_test: usize, style: DigitStyle, seed: u64 },
    Spirals { n_train: usize, n_test: usize, classes: usize, noise: f64, seed: u64 },
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf, classes: usize },
    Csv { train: PathBuf, test: PathBuf, classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub members: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub battery: Vec<AttackSpec>,
    pub seed: u64,
    pub transfer_attack: AttackSpec,
    pub blackbox: bool,
    pub surrogate_seed: u64,
    pub surrogate_variant: Variant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<ReportFormat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub train: CeatConfig,
    pub sgd: SgdSettings,
    pub eval: EvalConfig,
    pub output: OutputConfig,
    /// First 16 hex digits of SHA-256 over the sorted effective settings.
    pub hash: String,
}

fn parse_list<T: FromStr<Err = Error>>(value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

impl RunConfig {
    /// Parses `path`, then applies `overrides` (each `section.key=value`).
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, overrides, &base)
    }

    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut raw = RawConfig::parse(text)?;
        for o in overrides {
            raw.apply_override(o)?;
        }
        for (s, k) in REQUIRED {
            raw.required(s, k)?;
        }
        let hash = {
            let digest = Sha256::digest(raw.canonical().as_bytes());
            digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
        };

        let kind = raw.string_or("dataset", "kind", "");
        let dseed = raw.parse_or("dataset", "seed", 1234u64)?;
        let dataset = match kind.as_str() {
            "digits" => {
                let d = DigitStyle::default();
                DatasetSource::Digits {
                    n_train: raw.parse_or("dataset", "n_train", 2000)?,
                    n_test: raw.parse_or("dataset", "n_test", 1000)?,
                    style: DigitStyle {
                        side: raw.parse_or("dataset", "side", d.side)?,
                        jitter: raw.parse_or("dataset", "jitter", d.jitter)?,
                        rotation: raw.parse_or("dataset", "rotation", d.rotation)?,
                        pixel_noise: raw.parse_or("dataset", "pixel_noise", d.pixel_noise)?,
                    },
                    seed: dseed,
                }
            }
            "spirals" => DatasetSource::Spirals {
                n_train: raw.parse_or("dataset", "n_train", 100)?,
                n_test: raw.parse_or("dataset", "n_test", 100)?,
                classes: raw.parse_or("dataset", "classes", 2)?,
                noise: raw.parse_or("dataset", "noise", 0.05)?,
                seed: dseed,
            },
            "idx" => {
                let p = |k: &str| raw.required("dataset", k).map(|(v, _)| resolve(base, v));
                DatasetSource::Idx {
                    train_images: p("train_images")?,
                    train_labels: p("train_labels")?,
                    test_images: p("test_images")?,
                    test_labels: p("test_labels")?,
                    classes: raw.parse_or("dataset", "classes", 10)?,
                }
            }
            "csv" => DatasetSource::Csv {
                train: resolve(base, &raw.required("dataset", "train_csv")?.0),
                test: resolve(base, &raw.required("dataset", "test_csv")?.0),
                classes: raw.parse_or("dataset", "classes", 10)?,
            },
            other => {
                return Err(Error::config(format!(
                    "{}: unknown dataset kind `{other}` (digits, spirals, idx, csv)",
                    raw.origin("dataset", "kind")
                )))
            }
        };

        let arch_entry = raw.required("model", "arch")?;
        let arch = arch_entry
            .0
            .parse::<Arch>()
            .map_err(|e| Error::config(format!("{}: {e}", arch_entry.1)))?;
        let model = ModelConfig {
            arch,
            members: raw.parse_or("model", "members", 3)?,
            seed: raw.parse_or("model", "seed", 0)?,
        };
        if model.members < 2 {
            return Err(Error::config(format!(
                "{}: model.members must be at least 2, got {}",
                raw.origin("model", "members"),
                model.members
            )));
        }

        let located = |section: &str, key: &str, e: Error| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", raw.origin(section, key))),
            other => other,
        };
        let variant: Variant = raw
            .string_or("train", "variant", "ceat")
            .parse()
            .map_err(|e| located("train", "variant", e))?;
        let default_attack = AttackSpec::training_default();
        let train_kind: AttackKind = raw
            .string_or("train", "attack", "pgd")
            .parse()
            .map_err(|e| located("train", "attack", e))?;
        let mut train_attack = AttackSpec::new(
            train_kind,
            raw.parse_or("train", "epsilon", default_attack.epsilon)?,
            raw.parse_or("train", "alpha", default_attack.alpha)?,
            raw.parse_or("train", "steps", default_attack.steps)?,
        );
        let random_start = raw.parse_or("train", "random_start", train_attack.random_start)?;
        train_attack = train_attack.with_random_start(random_start);
        let epochs = raw.parse_or("train", "epochs", 20)?;
        let train = CeatConfig {
            lambda: raw.parse_or("train", "lambda", 1.0)?,
            mu: raw.parse_or("train", "mu", 5.0)?,
            train_attack,
            epochs,
            batch_size: raw.parse_or("train", "batch_size", 64)?,
            seed: model.seed,
            variant,
            terms: LossTerms {
                disparity: raw.parse_or("train", "use_ed", true)?,
                adv: raw.parse_or("train", "use_ladv", true)?,
                nat: raw.parse_or("train", "use_lnat", true)?,
            },
        };
        for key in ["lambda", "mu", "batch_size"] {
            let ok = match key {
                "lambda" => train.lambda >= 0.0 && train.lambda.is_finite(),
                "mu" => train.mu >= 0.0 && train.mu.is_finite(),
                _ => train.batch_size > 0,
            };
            if !ok {
                return Err(Error::config(format!(
                    "{}: train.{key} out of range",
                    raw.origin("train", key)
                )));
            }
        }
        train.validate().map_err(|e| located("train", "attack", e))?;

        let schedule = match raw.string_or("train", "lr_schedule", "proportional").as_str() {
            "proportional" => proportional_schedule(epochs),
            "constant" => Vec::new(),
            other => {
                return Err(Error::config(format!(
                    "{}: unknown lr_schedule `{other}` (proportional, constant)",
                    raw.origin("train", "lr_schedule")
                )))
            }
        };
        let sgd = SgdSettings {
            learning_rate: raw.parse_or("train", "learning_rate", 0.01)?,
            momentum: raw.parse_or("train", "momentum", 0.9)?,
            schedule,
            clip_norm: raw.optional_or("train", "clip_norm", DEFAULT_CLIP_NORM)?,
        };
        if !(sgd.learning_rate > 0.0 && sgd.learning_rate.is_finite()) {
            return Err(Error::config(format!("{}: train.learning_rate must be positive", raw.origin("train", "learning_rate"))));
        }
        if let Some(c) = sgd.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("{}: train.clip_norm must be positive or `none`", raw.origin("train", "clip_norm"))));
            }
        }
        if !(0.0..1.0).contains(&sgd.momentum) {
            return Err(Error::config(format!("{}: train.momentum must lie in [0, 1)", raw.origin("train", "momentum"))));
        }

        let eps = raw.parse_or("eval", "epsilon", crate::attacks::EVAL_EPSILON)?;
        let alpha = raw.parse_or("eval", "alpha", crate::attacks::EVAL_STEP)?;
        let steps = raw.parse_or("eval", "steps", crate::attacks::EVAL_STEPS)?;
        let make = |kind: AttackKind| AttackSpec::new(kind, eps, alpha, steps);
        let kinds: Vec<AttackKind> =
            parse_list(&raw.string_or("eval", "attacks", "pgd,mim,cw,fgsm")).map_err(|e| located("eval", "attacks", e))?;
        let battery: Vec<AttackSpec> = kinds.into_iter().map(make).collect();
        for spec in &battery {
            spec.validate().map_err(|e| located("eval", "steps", e))?;
        }
        let transfer_kind: AttackKind = raw
            .string_or("eval", "transfer_attack", "pgd")
            .parse()
            .map_err(|e| located("eval", "transfer_attack", e))?;
        let eval = EvalConfig {
            battery,
            seed: raw.parse_or("eval", "seed", 0)?,
            transfer_attack: make(transfer_kind),
            blackbox: raw.parse_or("eval", "blackbox", false)?,
            surrogate_seed: raw.parse_or("eval", "surrogate_seed", model.seed.wrapping_add(1000))?,
            surrogate_variant: raw
                .string_or("eval", "surrogate_variant", "vanilla_eat")
                .parse()
                .map_err(|e| located("eval", "surrogate_variant", e))?,
        };

        let output = OutputConfig {
            dir: resolve(base, &raw.string_or("output", "dir", "out")),
            formats: parse_list(&raw.string_or("output", "formats", "json")).map_err(|e| located("output", "formats", e))?,
        };

        Ok(RunConfig { dataset, model, train, sgd, eval, output, hash })
    }

    /// `(train, test)` datasets described by the `[dataset]` section.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSource::Digits { n_train, n_test, style, seed } => Ok((
                synth_digits(*n_train, style, *seed)?,
                synth_digits(*n_test, style, seed.wrapping_add(1))?,
            )),
            DatasetSource::Spirals { n_train, n_test, classes, noise, seed } => Ok((
                synth_spirals(n_train.div_ceil(*classes), *classes, *noise, *seed)?,
                synth_spirals(n_test.div_ceil(*classes), *classes, *noise, seed.wrapping_add(1))?,
            )),
            DatasetSource::Idx { train_images, train_labels, test_images, test_labels, classes } => Ok((
                load_idx(train_images, train_labels, *classes)?,
                load_idx(test_images, test_labels, *classes)?,
            )),
            DatasetSource::Csv { train, test, classes } => Ok((load_csv(train, *classes)?, load_csv(test, *classes)?)),
        }
    }
}
