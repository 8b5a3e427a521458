use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use xlssl_core::evaluation::SyntheticSpec;
use xlssl_core::experiments::{ExperimentKind, ExperimentPlan};
use xlssl_core::features::{FeatureExtractor, FeatureParams};
use xlssl_core::ssl::SslMode;
use xlssl_core::trainer::TrainConfig;

use crate::error::{io_error, CliError, Result};

pub const CACHE_ENV: &str = "XLSSL_CACHE";

/// Everything a run needs, loaded from one JSON file. Missing keys take
/// their defaults; unknown keys are an error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    pub features: FeatureParams,
    pub paths: Paths,
    /// Labeled target utterances used by `train` when a target is given.
    pub n_labeled: usize,
}

/// Experiment plan minus the training config, which lives under `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub labeled_counts: Vec<usize>,
    pub taus: Vec<f64>,
    pub modes: Vec<SslMode>,
    pub tau_n_labeled: usize,
    pub seeds: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let p = ExperimentPlan::default();
        Self {
            kind: p.kind,
            labeled_counts: p.labeled_counts,
            taus: p.taus,
            modes: p.modes,
            tau_n_labeled: p.tau_n_labeled,
            seeds: p.seeds,
            synthetic: p.synthetic,
        }
    }
}

/// Prepared data directories hold `manifest.jsonl` and `splits.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub cache_dir: PathBuf,
    /// Directory of precomputed `.femb` embeddings, read by the bypass encoder.
    pub embeddings_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            cache_dir: PathBuf::from("cache"),
            embeddings_dir: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts empty), then applies `key=value` overrides
    /// and the cache environment variable.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        if !value.is_object() {
            return Err(CliError::validation("config must be a JSON object"));
        }
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| {
            let err = CliError::validation(e.to_string());
            match path {
                Some(p) => err.context(p.display()),
                None => err,
            }
        })?;
        if let Ok(dir) = std::env::var(CACHE_ENV) {
            if !dir.is_empty() {
                cfg.paths.cache_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    pub fn plan(&self) -> ExperimentPlan {
        let e = &self.experiment;
        ExperimentPlan {
            kind: e.kind,
            labeled_counts: e.labeled_counts.clone(),
            taus: e.taus.clone(),
            modes: e.modes.clone(),
            tau_n_labeled: e.tau_n_labeled,
            seeds: e.seeds,
            train: self.train.clone(),
            synthetic: e.synthetic.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        FeatureExtractor::new(self.features.clone())?;
        self.plan().validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::validation(format!("--set expects key=value, got {assignment:?}")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::validation(format!("malformed config key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::validation(format!("config key {key:?} descends into a non-object")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::validation(format!("config key {key:?} descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// One `key = default` line per leaf of the default config.
pub fn key_listing() -> String {
    let value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (JSON file or --set key=value; flags win):\n");
    for (k, v) in lines {
        out.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    out.push_str(&format!("\n{CACHE_ENV} overrides paths.cache_dir; --cache overrides both.\n"));
    out
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn set_overrides_nested_keys() {
        let mut v = Value::Object(Map::new());
        apply_set(&mut v, "train.loss.tau=0.65").unwrap();
        apply_set(&mut v, "experiment.kind=synthetic").unwrap();
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.train.loss.tau, 0.65);
        assert_eq!(cfg.experiment.kind, ExperimentKind::Synthetic);
        assert_eq!(cfg.train.loss.lambda_a, 0.8);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut v = Value::Object(Map::new());
        apply_set(&mut v, "train.loss.lamda_a=1").unwrap();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn listing_covers_every_leaf() {
        let text = key_listing();
        for key in ["train.loss.lambda_a", "train.loss.lambda_h", "train.arch.kind", "features.fmax", "paths.cache_dir", "experiment.synthetic.dim", "n_labeled"] {
            assert!(text.contains(key), "{key} missing");
        }
        assert!(text.contains("0.8") && text.contains("0.4"));
    }
}
