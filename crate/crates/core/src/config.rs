//! Experiment configuration and its flat `key = value` file format.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! `method` is required; every other key has a default. Lists are comma
//! separated. [`ExperimentConfig::to_kv_string`] emits a file that parses back
//! to the same configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationMode, AggregationPolicy};
use crate::data::PartitionConfig;
use crate::model::{LossConfig, Metric, RegOperand};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedProto,
    FedAvg,
    Local,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::FedProto => "fedproto",
            Method::FedAvg => "fedavg",
            Method::Local => "local",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fedproto" => Ok(Method::FedProto),
            "fedavg" => Ok(Method::FedAvg),
            "local" => Ok(Method::Local),
            other => Err(format!(
                "unknown method `{other}` (expected fedproto, fedavg or local)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Idx { images: PathBuf, labels: PathBuf },
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Synthetic => f.write_str("synthetic"),
            DatasetSource::Idx { images, labels } => {
                write!(f, "idx:{},{}", images.display(), labels.display())
            }
        }
    }
}

impl FromStr for DatasetSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "synthetic" {
            return Ok(DatasetSource::Synthetic);
        }
        let paths = s
            .strip_prefix("idx:")
            .ok_or_else(|| format!("expected `synthetic` or `idx:<images>,<labels>`, got `{s}`"))?;
        let (images, labels) = paths
            .split_once(',')
            .ok_or_else(|| "idx dataset needs `idx:<images>,<labels>`".to_string())?;
        Ok(DatasetSource::Idx {
            images: images.trim().into(),
            labels: labels.trim().into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub dataset: DatasetSource,
    // synthetic generator
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    // partition
    pub clients: usize,
    pub n_avg: f64,
    pub k_avg: f64,
    pub stdev_n: f64,
    pub stdev_k: f64,
    pub test_fraction: f64,
    pub disjoint_pools: bool,
    // models
    pub embed_dim: usize,
    /// Hidden widths cycled over the mlp1 clients.
    pub hidden: Vec<usize>,
    /// Fraction of clients running the mlp1 embedding; the rest are linear.
    pub mlp_fraction: f64,
    // local solver
    pub lr: f64,
    pub momentum: f64,
    pub local_epochs: usize,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    /// More than one value requests a sweep.
    pub lambda: Vec<f64>,
    pub metric: Metric,
    pub reg_operand: RegOperand,
    pub rounds: usize,
    pub aggregation: AggregationMode,
    pub seed: u64,
    pub parallel: bool,
    pub record_timing: bool,
    // outputs
    pub output_json: Option<PathBuf>,
    pub output_csv: Option<PathBuf>,
    // theory checks
    pub theory_probes: usize,
    pub epsilon: Option<f64>,
    // transport
    pub bind: String,
    pub server: String,
    pub expected_clients: Option<usize>,
    pub client_id: Option<u32>,
    pub round_timeout_ms: u64,
    // communication benchmark
    pub model_params: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::FedProto,
            dataset: DatasetSource::Synthetic,
            num_classes: 10,
            input_dim: 32,
            samples_per_class: 300,
            cluster_spread: 0.25,
            clients: 20,
            n_avg: 3.0,
            k_avg: 100.0,
            stdev_n: 2.0,
            stdev_k: 0.0,
            test_fraction: 0.2,
            disjoint_pools: false,
            embed_dim: 50,
            hidden: vec![crate::model::DEFAULT_HIDDEN],
            mlp_fraction: 1.0,
            lr: 0.01,
            momentum: 0.5,
            local_epochs: 1,
            batch_size: Some(8),
            lambda: vec![1.0],
            metric: Metric::SqL2,
            reg_operand: RegOperand::ClassMean,
            rounds: 50,
            aggregation: AggregationMode::NormalizedMean,
            seed: 0,
            parallel: true,
            record_timing: false,
            output_json: None,
            output_csv: None,
            theory_probes: 16,
            epsilon: None,
            bind: "127.0.0.1:7878".into(),
            server: "127.0.0.1:7878".into(),
            expected_clients: None,
            client_id: None,
            round_timeout_ms: 30_000,
            model_params: None,
        }
    }
}

const KEYS: &[&str] = &[
    "method",
    "dataset",
    "num_classes",
    "input_dim",
    "samples_per_class",
    "cluster_spread",
    "clients",
    "n_avg",
    "k_avg",
    "stdev_n",
    "stdev_k",
    "test_fraction",
    "disjoint_pools",
    "embed_dim",
    "hidden",
    "mlp_fraction",
    "lr",
    "momentum",
    "local_epochs",
    "batch_size",
    "lambda",
    "metric",
    "reg_operand",
    "rounds",
    "aggregation",
    "seed",
    "parallel",
    "record_timing",
    "output_json",
    "output_csv",
    "theory_probes",
    "epsilon",
    "bind",
    "server",
    "expected_clients",
    "client_id",
    "round_timeout_ms",
    "model_params",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected a boolean, got `{value}`"),
        )),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Parses the flat config format and validates the result.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::config(key, "unknown key"));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        if !seen.contains("method") {
            return Err(Error::config("method", "required key is missing"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let opt = |v: &str| (v != "none" && !v.is_empty()).then(|| v.to_string());
        match key {
            "method" => self.method = parse(key, value)?,
            "dataset" => self.dataset = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "samples_per_class" => self.samples_per_class = parse(key, value)?,
            "cluster_spread" => self.cluster_spread = parse(key, value)?,
            "clients" => self.clients = parse(key, value)?,
            "n_avg" => self.n_avg = parse(key, value)?,
            "k_avg" => self.k_avg = parse(key, value)?,
            "stdev_n" => self.stdev_n = parse(key, value)?,
            "stdev_k" => self.stdev_k = parse(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "disjoint_pools" => self.disjoint_pools = parse_bool(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "mlp_fraction" => self.mlp_fraction = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "local_epochs" => self.local_epochs = parse(key, value)?,
            "batch_size" => {
                self.batch_size = if value == "full" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "lambda" => self.lambda = parse_list(key, value)?,
            "metric" => self.metric = parse(key, value)?,
            "reg_operand" => self.reg_operand = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "aggregation" => self.aggregation = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "parallel" => self.parallel = parse_bool(key, value)?,
            "record_timing" => self.record_timing = parse_bool(key, value)?,
            "output_json" => self.output_json = opt(value).map(PathBuf::from),
            "output_csv" => self.output_csv = opt(value).map(PathBuf::from),
            "theory_probes" => self.theory_probes = parse(key, value)?,
            "epsilon" => {
                self.epsilon = opt(value).map(|v| parse(key, &v)).transpose()?;
            }
            "bind" => self.bind = value.to_string(),
            "server" => self.server = value.to_string(),
            "expected_clients" => {
                self.expected_clients = opt(value).map(|v| parse(key, &v)).transpose()?;
            }
            "client_id" => {
                self.client_id = opt(value).map(|v| parse(key, &v)).transpose()?;
            }
            "round_timeout_ms" => self.round_timeout_ms = parse(key, value)?,
            "model_params" => {
                self.model_params = opt(value).map(|v| parse(key, &v)).transpose()?;
            }
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Checks ranges and cross-key constraints.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.embed_dim == 0 {
            return fail("embed_dim", "must be ≥ 1");
        }
        if self.clients == 0 {
            return fail("clients", "must be ≥ 1");
        }
        if self.dataset == DatasetSource::Synthetic {
            if self.num_classes == 0 || self.input_dim == 0 || self.samples_per_class == 0 {
                return fail("num_classes", "synthetic sizes must be ≥ 1");
            }
            if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
                return fail("cluster_spread", "must be positive");
            }
            if self.n_avg > self.num_classes as f64 {
                return fail("n_avg", "exceeds num_classes");
            }
        }
        if !(self.n_avg >= 1.0) {
            return fail("n_avg", "must be ≥ 1");
        }
        if !(self.k_avg >= 1.0) {
            return fail("k_avg", "must be ≥ 1");
        }
        if !(self.stdev_n >= 0.0) || !(self.stdev_k >= 0.0) {
            return fail("stdev_n", "standard deviations must be ≥ 0");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction", "must be in (0, 1)");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden", "widths must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.mlp_fraction) {
            return fail("mlp_fraction", "must be in [0, 1]");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be finite and ≥ 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", "must be in [0, 1)");
        }
        if self.local_epochs == 0 {
            return fail("local_epochs", "must be ≥ 1");
        }
        if self.batch_size == Some(0) {
            return fail("batch_size", "must be ≥ 1 or `full`");
        }
        if self.lambda.is_empty() || self.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return fail("lambda", "values must be finite and ≥ 0");
        }
        if self.theory_probes < 2 {
            return fail("theory_probes", "must be ≥ 2");
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                return fail("epsilon", "must be > 0");
            }
        }
        if self.expected_clients == Some(0) {
            return fail("expected_clients", "must be ≥ 1");
        }
        if self.model_params == Some(0) {
            return fail("model_params", "must be ≥ 1");
        }
        Ok(())
    }

    /// The single λ of a non-sweep run.
    pub fn single_lambda(&self) -> Result<f64> {
        match self.lambda.as_slice() {
            [l] => Ok(*l),
            _ => Err(Error::config(
                "lambda",
                "a single run takes one value; use the sweep entry point for lists",
            )),
        }
    }

    /// Copy of this config with one λ.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        ExperimentConfig {
            lambda: vec![lambda],
            ..self.clone()
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            lambda: self.single_lambda()?,
            metric: self.metric,
            operand: self.reg_operand,
        })
    }

    pub fn partition_config(&self) -> PartitionConfig {
        PartitionConfig {
            clients: self.clients,
            n_avg: self.n_avg,
            k_avg: self.k_avg,
            stdev_n: self.stdev_n,
            stdev_k: self.stdev_k,
            test_fraction: self.test_fraction,
            disjoint_pools: self.disjoint_pools,
            seed: self.seed,
        }
    }

    pub fn policy(&self) -> AggregationPolicy {
        AggregationPolicy {
            mode: self.aggregation,
        }
    }

    pub fn expected_clients(&self) -> usize {
        self.expected_clients.unwrap_or(self.clients)
    }

    /// Canonical text form; parses back to `self`.
    pub fn to_kv_string(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".to_string(), |p| p.display().to_string())
        };
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let lines = [
            ("method", self.method.to_string()),
            ("dataset", self.dataset.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("cluster_spread", self.cluster_spread.to_string()),
            ("clients", self.clients.to_string()),
            ("n_avg", self.n_avg.to_string()),
            ("k_avg", self.k_avg.to_string()),
            ("stdev_n", self.stdev_n.to_string()),
            ("stdev_k", self.stdev_k.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("disjoint_pools", self.disjoint_pools.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden", join(&self.hidden)),
            ("mlp_fraction", self.mlp_fraction.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            (
                "batch_size",
                self.batch_size
                    .map_or("full".to_string(), |b| b.to_string()),
            ),
            ("lambda", join(&self.lambda)),
            ("metric", self.metric.to_string()),
            ("reg_operand", self.reg_operand.to_string()),
            ("rounds", self.rounds.to_string()),
            ("aggregation", self.aggregation.to_string()),
            ("seed", self.seed.to_string()),
            ("parallel", self.parallel.to_string()),
            ("record_timing", self.record_timing.to_string()),
            ("output_json", opt_path(&self.output_json)),
            ("output_csv", opt_path(&self.output_csv)),
            ("theory_probes", self.theory_probes.to_string()),
            ("epsilon", opt(self.epsilon.map(|e| e.to_string()))),
            ("bind", self.bind.clone()),
            ("server", self.server.clone()),
            (
                "expected_clients",
                opt(self.expected_clients.map(|e| e.to_string())),
            ),
            ("client_id", opt(self.client_id.map(|e| e.to_string()))),
            ("round_timeout_ms", self.round_timeout_ms.to_string()),
            (
                "model_params",
                opt(self.model_params.map(|e| e.to_string())),
            ),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
