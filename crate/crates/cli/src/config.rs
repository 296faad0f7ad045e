//! Experiment configuration.
//!
//! Configs are JSON objects with kebab-case keys. Every key is optional
//! except where noted; unknown keys are rejected with a suggestion.

use std::path::{Path, PathBuf};

use fedfta_core::aggregate::{Aggregator, GssConfig};
use fedfta_core::data::{BlobSpec, PartitionScheme};
use fedfta_core::model::Optimizer;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(rename = "class-counts", default = "default_class_counts")]
        class_counts: Vec<usize>,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(rename = "noise-std", default = "default_noise_std")]
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
    },
}

fn default_class_counts() -> Vec<usize> {
    vec![684, 633, 810]
}
fn default_separation() -> f64 {
    3.0
}
fn default_noise_std() -> f64 {
    1.0
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            class_counts: default_class_counts(),
            separation: default_separation(),
            noise_std: default_noise_std(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub data: DataSource,
    pub input_dim: usize,
    /// Class count; derived from the data when absent.
    pub class_count: Option<usize>,
    /// Output width of the frozen base.
    pub feature_dim: usize,
    /// Hidden layer widths of the head.
    pub hidden: Vec<usize>,
    pub test_ratio: f64,
    pub val_ratio: f64,
    pub clients: usize,
    pub partition: PartitionScheme,
    pub rounds: usize,
    /// Participants per round (K).
    pub participants: usize,
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub aggregator: Aggregator,
    pub gss: GssConfig,
    /// Seeds per comparison cell.
    pub seeds: usize,
    pub aggregators: Vec<Aggregator>,
    pub distributions: Vec<PartitionScheme>,
    pub target_accuracy: f64,
    pub parallel: bool,
    pub output_dir: PathBuf,
    /// Where `gen-data` writes; `<output-dir>/dataset.csv` when absent.
    pub dataset_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            data: DataSource::default(),
            input_dim: 16,
            class_count: None,
            feature_dim: 64,
            hidden: vec![200, 100],
            test_ratio: 0.2,
            val_ratio: 0.1,
            clients: 10,
            partition: PartitionScheme::Iid,
            rounds: 100,
            participants: 10,
            epochs: 2,
            eta: 0.001,
            batch_size: 32,
            optimizer: Optimizer::Sgd,
            aggregator: Aggregator::Fta,
            gss: GssConfig::default(),
            seeds: 5,
            aggregators: vec![Aggregator::Fedavg, Aggregator::Fta],
            distributions: vec![
                PartitionScheme::Iid,
                PartitionScheme::Dirichlet { alpha: 0.5 },
            ],
            target_accuracy: 0.88,
            parallel: true,
            output_dir: PathBuf::from("runs"),
            dataset_path: None,
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "master-seed",
    "data",
    "input-dim",
    "class-count",
    "feature-dim",
    "hidden",
    "test-ratio",
    "val-ratio",
    "clients",
    "partition",
    "rounds",
    "participants",
    "epochs",
    "eta",
    "batch-size",
    "optimizer",
    "aggregator",
    "gss",
    "seeds",
    "aggregators",
    "distributions",
    "target-accuracy",
    "parallel",
    "output-dir",
    "dataset-path",
];
const DATA_KEYS: &[&str] = &["source", "class-counts", "separation", "noise-std", "path"];
const PARTITION_KEYS: &[&str] = &["kind", "alpha", "per-client"];
const GSS_KEYS: &[&str] = &[
    "x-lower",
    "x-upper",
    "tolerance",
    "max-iterations",
    "reuse-probes",
];

/// Common spellings that map to a known key.
const ALIASES: &[(&str, &str)] = &[
    ("lr", "eta"),
    ("learning-rate", "eta"),
    ("learning_rate", "eta"),
    ("k", "participants"),
    ("K", "participants"),
    ("seed", "master-seed"),
    ("e", "epochs"),
    ("T", "rounds"),
    ("num-clients", "clients"),
];

fn suggest(key: &str, known: &[&str]) -> Option<String> {
    if let Some((_, to)) = ALIASES.iter().find(|(from, _)| *from == key) {
        if known.contains(to) {
            return Some((*to).to_string());
        }
    }
    let normalized = key.replace('_', "-").to_lowercase();
    known
        .iter()
        .map(|k| (k, strsim::jaro_winkler(&normalized, k)))
        .filter(|(_, score)| *score >= 0.8)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| (*k).to_string())
}

fn check_keys(obj: &Map<String, Value>, known: &[&str], prefix: &str) -> Result<(), CliError> {
    for key in obj.keys() {
        if !known.contains(&key.as_str()) {
            let suggestion = suggest(key, known);
            let hint = suggestion
                .as_ref()
                .map(|s| format!("; did you mean `{prefix}{s}`?"))
                .unwrap_or_default();
            return Err(CliError::Config {
                key: format!("{prefix}{key}"),
                message: format!("unknown key{hint}"),
            });
        }
    }
    Ok(())
}

fn check_schema(value: &Value) -> Result<(), CliError> {
    let root = value.as_object().ok_or_else(|| CliError::Config {
        key: String::new(),
        message: "config must be a JSON object".into(),
    })?;
    check_keys(root, TOP_KEYS, "")?;
    if let Some(Value::Object(data)) = root.get("data") {
        check_keys(data, DATA_KEYS, "data.")?;
    }
    if let Some(Value::Object(p)) = root.get("partition") {
        check_keys(p, PARTITION_KEYS, "partition.")?;
    }
    if let Some(Value::Object(g)) = root.get("gss") {
        check_keys(g, GSS_KEYS, "gss.")?;
    }
    if let Some(Value::Array(ds)) = root.get("distributions") {
        for d in ds {
            if let Value::Object(d) = d {
                check_keys(d, PARTITION_KEYS, "distributions[].")?;
            }
        }
    }
    Ok(())
}

fn invalid(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates JSON text; missing keys take their defaults.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| invalid("", e.to_string()))?;
        check_schema(&value)?;
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| invalid("", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Class count implied by the config, if it can be known without
    /// reading a CSV.
    pub fn declared_classes(&self) -> Option<usize> {
        match (&self.data, self.class_count) {
            (_, Some(c)) => Some(c),
            (DataSource::Synthetic { class_counts, .. }, None) => Some(class_counts.len()),
            (DataSource::Csv { .. }, None) => None,
        }
    }

    pub fn blob_spec(&self) -> Option<BlobSpec> {
        match &self.data {
            DataSource::Synthetic {
                class_counts,
                separation,
                noise_std,
            } => Some(BlobSpec {
                class_counts: class_counts.clone(),
                input_dim: self.input_dim,
                separation: *separation,
                noise_std: *noise_std,
            }),
            DataSource::Csv { .. } => None,
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("dataset.csv"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.input_dim == 0 {
            return Err(invalid("input-dim", "must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(invalid("feature-dim", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden", "layer widths must be positive"));
        }
        if let DataSource::Synthetic {
            class_counts,
            separation,
            noise_std,
        } = &self.data
        {
            if class_counts.len() < 2 {
                return Err(invalid("data.class-counts", "need at least 2 classes"));
            }
            if class_counts.contains(&0) {
                return Err(invalid("data.class-counts", "counts must be positive"));
            }
            if let Some(c) = self.class_count {
                if c != class_counts.len() {
                    return Err(invalid(
                        "class-count",
                        format!("{c} disagrees with {} class counts", class_counts.len()),
                    ));
                }
            }
            if !separation.is_finite() || *separation <= 0.0 {
                return Err(invalid("data.separation", "must be positive"));
            }
            if !noise_std.is_finite() || *noise_std < 0.0 {
                return Err(invalid("data.noise-std", "must be nonnegative"));
            }
        }
        if let Some(c) = self.class_count {
            if c < 2 {
                return Err(invalid("class-count", "need at least 2 classes"));
            }
        }
        if !(self.test_ratio > 0.0 && self.test_ratio < 1.0) {
            return Err(invalid("test-ratio", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.val_ratio) {
            return Err(invalid("val-ratio", "must lie in [0, 1)"));
        }
        if self.clients == 0 {
            return Err(invalid("clients", "must be at least 1"));
        }
        if self.participants == 0 || self.participants > self.clients {
            return Err(invalid(
                "participants",
                format!(
                    "K = {} must be between 1 and clients = {}",
                    self.participants, self.clients
                ),
            ));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(invalid("eta", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch-size", "must be at least 1"));
        }
        self.gss
            .validate()
            .map_err(|e| invalid("gss", e.to_string()))?;
        let schemes = std::iter::once(("partition", &self.partition))
            .chain(self.distributions.iter().map(|d| ("distributions", d)));
        for (key, scheme) in schemes {
            check_scheme(key, scheme, self.clients)?;
        }
        let uses_fta = self.aggregator == Aggregator::Fta || self.aggregators.contains(&Aggregator::Fta);
        if uses_fta && self.val_ratio == 0.0 {
            return Err(invalid("val-ratio", "fta needs a validation split (val-ratio > 0)"));
        }
        if self.seeds == 0 {
            return Err(invalid("seeds", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(invalid("target-accuracy", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn check_scheme(key: &str, scheme: &PartitionScheme, clients: usize) -> Result<(), CliError> {
    match *scheme {
        PartitionScheme::Iid => Ok(()),
        PartitionScheme::Dirichlet { alpha } => {
            if !alpha.is_finite() || alpha <= 0.0 {
                Err(invalid(key, format!("dirichlet alpha {alpha} must be positive")))
            } else if clients < 2 {
                Err(invalid(key, "dirichlet partition needs at least 2 clients"))
            } else {
                Ok(())
            }
        }
        PartitionScheme::Shards { per_client: 0 } => {
            Err(invalid(key, "shards per client must be positive"))
        }
        PartitionScheme::Shards { .. } => Ok(()),
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_json(&text)
}

/// Applies a `FEDFTA_SEED`-style override.
pub fn apply_seed_override(cfg: &mut ExperimentConfig, value: Option<&str>) -> Result<(), CliError> {
    if let Some(v) = value {
        cfg.master_seed = v
            .trim()
            .parse()
            .map_err(|_| invalid("FEDFTA_SEED", format!("`{v}` is not an unsigned integer")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: CliError) -> String {
        match err {
            CliError::Config { key, .. } => key,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"master-seed": 1}"#).unwrap();
        assert_eq!(cfg.master_seed, 1);
        assert_eq!(cfg.clients, 10);
        assert_eq!(cfg.rounds, 100);
        assert_eq!(cfg.eta, 0.001);
        assert_eq!(cfg.aggregator, Aggregator::Fta);
        assert_eq!(cfg.gss, GssConfig::default());
        assert_eq!(cfg.hidden, vec![200, 100]);
        assert_eq!(cfg.declared_classes(), Some(3));
    }

    #[test]
    fn too_many_participants_names_k() {
        let err = ExperimentConfig::from_json(r#"{"participants": 20, "clients": 10}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("K = 20"), "{msg}");
        assert_eq!(key_of(err), "participants");
    }

    #[test]
    fn unknown_key_suggests_eta() {
        let err = ExperimentConfig::from_json(r#"{"lr": 0.1}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("eta"), "{msg}");
        assert_eq!(key_of(err), "lr");
        let err = ExperimentConfig::from_json(r#"{"batch_size": 3}"#).unwrap_err();
        assert!(err.to_string().contains("batch-size"));
        let err = ExperimentConfig::from_json(r#"{"gss": {"tol": 0.1}}"#).unwrap_err();
        assert_eq!(key_of(err), "gss.tol");
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = ExperimentConfig::from_json(
            r#"{
                "data": {"source": "synthetic", "class-counts": [5, 6], "separation": 3.0},
                "partition": {"kind": "dirichlet", "alpha": 0.3},
                "gss": {"tolerance": 0.001, "reuse-probes": true},
                "aggregator": "fedavg",
                "aggregators": ["fedavg"],
                "optimizer": "adam",
                "participants": 4
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.partition, PartitionScheme::Dirichlet { alpha: 0.3 });
        assert!(cfg.gss.reuse_probes);
        assert_eq!(cfg.gss.x_upper, 2.0);
        assert_eq!(cfg.optimizer, Optimizer::Adam);
        assert_eq!(cfg.declared_classes(), Some(2));
        let csv = ExperimentConfig::from_json(r#"{"data": {"source": "csv", "path": "x.csv"}}"#).unwrap();
        assert_eq!(csv.declared_classes(), None);
    }

    #[test]
    fn constraint_violations_name_keys() {
        for (json, key) in [
            (r#"{"input-dim": 0}"#, "input-dim"),
            (r#"{"eta": 0}"#, "eta"),
            (r#"{"epochs": 0}"#, "epochs"),
            (r#"{"test-ratio": 1.0}"#, "test-ratio"),
            (r#"{"val-ratio": 0}"#, "val-ratio"),
            (r#"{"gss": {"x-lower": 3}}"#, "gss"),
            (r#"{"partition": {"kind": "dirichlet", "alpha": -1}}"#, "partition"),
            (r#"{"class-count": 4}"#, "class-count"),
            (r#"{"data": {"source": "synthetic", "class-counts": [5]}}"#, "data.class-counts"),
        ] {
            let err = ExperimentConfig::from_json(json).unwrap_err();
            assert_eq!(key_of(err), key, "{json}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::from_json(r#"{"master-seed": 9, "rounds": 3}"#).unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn seed_override() {
        let mut cfg = ExperimentConfig::default();
        apply_seed_override(&mut cfg, Some("77")).unwrap();
        assert_eq!(cfg.master_seed, 77);
        apply_seed_override(&mut cfg, None).unwrap();
        assert_eq!(cfg.master_seed, 77);
        assert!(apply_seed_override(&mut cfg, Some("-1")).is_err());
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            parse_config(Path::new("/nonexistent/config.json")),
            Err(CliError::Io { .. })
        ));
    }
}
