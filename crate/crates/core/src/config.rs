//! Flat `key = value` run configuration.
//!
//! A config file holds one `key = value` pair per line; blank lines and text
//! after `#` are ignored. A `config.json` written by a previous run is also
//! accepted, so any artifact can be reproduced from its embedded config.
//! Values are resolved as defaults, then the file, then command-line
//! overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, ProblemSpec, Sparsifier, TraceLevel, Weights};
use crate::oracle::{GaussianPrior, InnovationFamily, InnovationModel};
use crate::problems::GenConfig;
use crate::sparsify::RegTopKParams;

/// Every key accepted in a config file or override.
pub const KEYS: &[&str] = &[
    "problem",
    "workers",
    "dim",
    "samples_per_worker",
    "mean_of_means",
    "sigma2",
    "h2",
    "eps2",
    "homogeneous",
    "sparsifier",
    "k",
    "mu",
    "c_unselected",
    "y_exponent",
    "zero_tolerance",
    "eta",
    "iterations",
    "weights",
    "seed",
    "trace_level",
    "data_dir",
    "sweep_s",
    "sweep_repeats",
    "sweep_sparsifiers",
    "oracle_a_local",
    "oracle_z_known",
    "oracle_family",
    "oracle_mu",
    "oracle_scale_with_gradient",
    "oracle_omega",
    "oracle_k",
    "oracle_samples",
    "oracle_p0_mean",
    "oracle_p0_var",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    LinearRegression,
    LogisticToy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifierKind {
    None,
    Topk,
    Regtopk,
}

/// Fully resolved settings for any subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub problem: ProblemKind,
    pub workers: usize,
    pub dim: usize,
    pub samples_per_worker: usize,
    pub mean_of_means: f64,
    pub sigma2: f64,
    pub h2: f64,
    pub eps2: f64,
    pub homogeneous: bool,
    pub sparsifier: SparsifierKind,
    pub k: usize,
    pub mu: f64,
    pub c_unselected: f64,
    pub y_exponent: f64,
    pub zero_tolerance: f64,
    pub eta: f64,
    pub iterations: usize,
    /// `uniform` or a comma-separated list of per-worker weights.
    pub weights: String,
    pub seed: u64,
    pub trace_level: TraceLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub sweep_s: Vec<f64>,
    pub sweep_repeats: usize,
    pub sweep_sparsifiers: Vec<SparsifierKind>,
    pub oracle_a_local: Vec<f64>,
    /// `index:value` pairs.
    pub oracle_z_known: Vec<String>,
    pub oracle_family: InnovationFamily,
    pub oracle_mu: f64,
    pub oracle_scale_with_gradient: bool,
    pub oracle_omega: f64,
    pub oracle_k: usize,
    pub oracle_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_p0_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_p0_var: Option<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        let gen = GenConfig::default();
        let reg = RegTopKParams::default();
        Self {
            problem: ProblemKind::LinearRegression,
            workers: gen.workers,
            dim: gen.dim,
            samples_per_worker: gen.samples_per_worker,
            mean_of_means: gen.mean_of_means,
            sigma2: gen.sigma2,
            h2: gen.h2,
            eps2: gen.eps2,
            homogeneous: gen.homogeneous,
            sparsifier: SparsifierKind::Regtopk,
            k: 60,
            mu: reg.mu,
            c_unselected: reg.c_unselected,
            y_exponent: reg.y_exponent,
            zero_tolerance: reg.zero_tolerance,
            eta: 0.01,
            iterations: 2500,
            weights: "uniform".into(),
            seed: 0,
            trace_level: TraceLevel::GapOnly,
            data_dir: None,
            sweep_s: (1..=10).map(|i| i as f64 / 10.0).collect(),
            sweep_repeats: 10,
            sweep_sparsifiers: vec![SparsifierKind::Topk, SparsifierKind::Regtopk],
            oracle_a_local: vec![3.0, -2.0, 1.0, 0.5],
            oracle_z_known: vec!["0:-1.5".into(), "1:1.2".into()],
            oracle_family: InnovationFamily::TanhSech2,
            oracle_mu: 0.5,
            oracle_scale_with_gradient: true,
            oracle_omega: 0.5,
            oracle_k: 2,
            oracle_samples: 100_000,
            oracle_p0_mean: None,
            oracle_p0_var: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for {key}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.trim().to_string()))
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl Settings {
    /// Defaults for a subcommand: `toy` starts from the two-worker logistic
    /// example.
    pub fn defaults_for_toy() -> Self {
        Self {
            problem: ProblemKind::LogisticToy,
            k: 1,
            eta: 0.9,
            iterations: 150,
            ..Self::default()
        }
    }

    /// Assigns one key. Unknown keys are rejected with the list of valid ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "problem" => self.problem = parse_enum(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "samples_per_worker" => self.samples_per_worker = parse(key, value)?,
            "mean_of_means" => self.mean_of_means = parse(key, value)?,
            "sigma2" => self.sigma2 = parse(key, value)?,
            "h2" => self.h2 = parse(key, value)?,
            "eps2" => self.eps2 = parse(key, value)?,
            "homogeneous" => self.homogeneous = parse(key, value)?,
            "sparsifier" => self.sparsifier = parse_enum(key, value)?,
            "k" => self.k = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "c_unselected" => self.c_unselected = parse(key, value)?,
            "y_exponent" => self.y_exponent = parse(key, value)?,
            "zero_tolerance" => self.zero_tolerance = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "weights" => {
                let v = value.trim();
                if v != "uniform" {
                    parse_list::<f64>(key, v)?;
                }
                self.weights = v.to_string();
            }
            "seed" => self.seed = parse(key, value)?,
            "trace_level" => self.trace_level = parse_enum(key, value)?,
            "data_dir" => {
                self.data_dir = match value.trim() {
                    "" | "none" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "sweep_s" => self.sweep_s = parse_list(key, value)?,
            "sweep_repeats" => self.sweep_repeats = parse(key, value)?,
            "sweep_sparsifiers" => {
                self.sweep_sparsifiers = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_enum(key, s))
                    .collect::<Result<_>>()?
            }
            "oracle_a_local" => self.oracle_a_local = parse_list(key, value)?,
            "oracle_z_known" => {
                let pairs: Vec<String> = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                parse_known_z(&pairs)?;
                self.oracle_z_known = pairs;
            }
            "oracle_family" => self.oracle_family = parse_enum(key, value)?,
            "oracle_mu" => self.oracle_mu = parse(key, value)?,
            "oracle_scale_with_gradient" => self.oracle_scale_with_gradient = parse(key, value)?,
            "oracle_omega" => self.oracle_omega = parse(key, value)?,
            "oracle_k" => self.oracle_k = parse(key, value)?,
            "oracle_samples" => self.oracle_samples = parse(key, value)?,
            "oracle_p0_mean" => self.oracle_p0_mean = parse_optional(key, value)?,
            "oracle_p0_var" => self.oracle_p0_var = parse_optional(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "override {assignment:?} is not of the form key=value"
            ))
        })?;
        self.set(key, value)
    }

    /// Applies the contents of a config file: either `key = value` lines or a
    /// JSON object (optionally nested under `"config"`).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        if text.trim_start().starts_with('{') {
            return self.apply_json(text);
        }
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        Ok(())
    }

    fn apply_json(&mut self, text: &str) -> Result<()> {
        let root: serde_json::Value = serde_json::from_str(text)?;
        let object = root
            .get("config")
            .unwrap_or(&root)
            .as_object()
            .ok_or_else(|| Error::Config("JSON config must be an object".into()))?;
        for (key, value) in object {
            let text = match value {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|v| match v {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                serde_json::Value::Null => String::new(),
                other => other.to_string(),
            };
            self.set(key, &text)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn reg_params(&self) -> RegTopKParams {
        RegTopKParams {
            mu: self.mu,
            c_unselected: self.c_unselected,
            y_exponent: self.y_exponent,
            zero_tolerance: self.zero_tolerance,
        }
    }

    pub fn sparsifier_of(&self, kind: SparsifierKind) -> Sparsifier {
        match kind {
            SparsifierKind::None => Sparsifier::None,
            SparsifierKind::Topk => Sparsifier::Topk,
            SparsifierKind::Regtopk => Sparsifier::Regtopk(self.reg_params()),
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            workers: self.workers,
            dim: self.dim,
            samples_per_worker: self.samples_per_worker,
            mean_of_means: self.mean_of_means,
            sigma2: self.sigma2,
            h2: self.h2,
            eps2: self.eps2,
            homogeneous: self.homogeneous,
            seed: self.seed,
        }
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let weights = if self.weights == "uniform" {
            Weights::Uniform
        } else {
            Weights::Explicit(parse_list("weights", &self.weights)?)
        };
        let problem = match self.problem {
            ProblemKind::LinearRegression => ProblemSpec::LinearRegression(self.gen_config()),
            ProblemKind::LogisticToy => ProblemSpec::LogisticToy,
        };
        let cfg = ExperimentConfig {
            problem,
            sparsifier: self.sparsifier_of(self.sparsifier),
            k: self.k,
            eta: self.eta,
            iterations: self.iterations,
            weights,
            seed: self.seed,
            trace_level: self.trace_level,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn innovation_model(&self) -> InnovationModel {
        let p0 = match (self.oracle_p0_mean, self.oracle_p0_var) {
            (None, None) => None,
            (mean, var) => Some(GaussianPrior {
                mean: mean.unwrap_or(0.0),
                var: var.unwrap_or(1.0),
            }),
        };
        InnovationModel {
            family: self.oracle_family,
            mu: self.oracle_mu,
            scale_with_gradient: self.oracle_scale_with_gradient,
            p0,
        }
    }

    pub fn known_z(&self) -> Result<BTreeMap<usize, f64>> {
        parse_known_z(&self.oracle_z_known)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// `<seed>-<first 12 hex digits of the digest>`
    pub fn run_id(&self) -> Result<String> {
        Ok(format!("{}-{}", self.seed, &self.digest()?[..12]))
    }
}

fn parse_known_z(pairs: &[String]) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for pair in pairs {
        let (index, value) = pair.split_once(':').ok_or_else(|| {
            Error::Config(format!("oracle_z_known entry {pair:?} is not index:value"))
        })?;
        let index: usize = parse("oracle_z_known", index)?;
        if out.insert(index, parse("oracle_z_known", value)?).is_some() {
            return Err(Error::Config(format!(
                "oracle_z_known repeats index {index}"
            )));
        }
    }
    Ok(out)
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
