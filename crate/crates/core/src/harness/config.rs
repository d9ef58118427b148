//! Experiment configuration: JSON file plus `--key value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::acquisition::PolicyConfig;
use crate::model::TrainConfig;
use crate::sim::SimConfig;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "BALPM_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { ensemble_size: 10, hidden: vec![2048, 256] }
    }
}

/// Feature files on disk. Formats follow the file extensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    /// Pool including the tuples drawn for the initial training set.
    pub pool: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    /// Optional JSON object `{tuple_id: {prompt, completion1, completion2}}`
    /// shown to human labelers.
    #[serde(default)]
    pub texts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimData {
    pub env: SimConfig,
    /// Prompts in the freshly generated validation and test sets.
    pub val_prompts: usize,
    pub test_prompts: usize,
}

impl Default for SimData {
    fn default() -> Self {
        Self { env: SimConfig::default(), val_prompts: 250, test_prompts: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Dataset(DatasetPaths),
    Sim(SimData),
}

/// Where labels for acquired tuples come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// The pool file's own labels (dataset data) or the oracle (sim data).
    #[default]
    Auto,
    Dataset,
    Oracle,
    Service,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub lease_ttl_s: u64,
    /// How long the harness waits for a batch to be labeled.
    pub round_timeout_s: u64,
    /// Shared secret expected in the `X-Balpm-Token` header.
    pub token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { lease_ttl_s: 600, round_timeout_s: 7 * 24 * 3600, token: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    pub labels: LabelMode,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Acquisition rounds after the initial training round.
    pub rounds: usize,
    pub init_train_size: usize,
    /// Evaluate test LL every `eval_every` rounds (the last round always).
    pub eval_every: usize,
    /// Run directory. Relative paths resolve against `$BALPM_OUT_DIR` when
    /// set.
    pub output_dir: PathBuf,
    /// Master seed. Split, model, training and acquisition seeds are derived
    /// from it per round; the `seed` fields of `policy` and `train` are
    /// ignored by the harness.
    pub seed: u64,
    pub save_checkpoints: bool,
    /// Fill the `wall_time_s` column. Off by default so that metrics files are
    /// reproducible byte for byte.
    pub log_wall_time: bool,
    /// Distance-profile cache; defaults to `knn.bin` in the run directory.
    pub knn_cache: Option<PathBuf>,
    pub service: ServiceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            data: DataSource::Sim(SimData::default()),
            labels: LabelMode::Auto,
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            rounds: 75,
            init_train_size: 320,
            eval_every: 1,
            output_dir: PathBuf::from("runs/experiment"),
            seed: 0,
            save_checkpoints: true,
            log_wall_time: false,
            knn_cache: None,
            service: ServiceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Read a config file, then apply `overrides` as `(dotted.key, value)`
    /// pairs. Values parse as JSON when they can and as strings otherwise.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.policy.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.model.ensemble_size == 0 || self.model.hidden.contains(&0) {
            return bad("model.ensemble_size and hidden sizes must be >= 1".into());
        }
        if self.init_train_size == 0 {
            return bad("init_train_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        match (&self.data, self.labels) {
            (DataSource::Sim(s), mode) => {
                s.env.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
                if s.val_prompts == 0 || s.test_prompts == 0 {
                    return bad("val_prompts and test_prompts must be >= 1".into());
                }
                if mode == LabelMode::Dataset {
                    return bad("sim data has no stored labels; use oracle or service".into());
                }
            }
            (DataSource::Dataset(d), mode) => {
                if mode == LabelMode::Oracle {
                    return bad("the oracle label mode needs sim data".into());
                }
                for p in [&d.pool, &d.val, &d.test] {
                    if !p.exists() {
                        return bad(format!("{} does not exist", p.display()));
                    }
                }
            }
        }
        Ok(())
    }

    /// `output_dir`, resolved against `$BALPM_OUT_DIR` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn label_mode(&self) -> LabelMode {
        match (self.labels, &self.data) {
            (LabelMode::Auto, DataSource::Sim(_)) => LabelMode::Oracle,
            (LabelMode::Auto, DataSource::Dataset(_)) => LabelMode::Dataset,
            (m, _) => m,
        }
    }
}

/// Set `dotted.key` in a JSON object, creating intermediate objects.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), HarnessError> {
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("bad override key {key:?}")));
    }
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(HarnessError::Config(format!("{key:?}: {part:?} is not an object")));
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), parsed);
            Ok(())
        }
        None => Err(HarnessError::Config(format!("{key:?}: parent is not an object"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::Policy;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.policy.batch_size, 320);
        assert_eq!(cfg.rounds, 75);
        assert_eq!(cfg.policy.entropy.k, 13);
        assert_eq!(cfg.policy.beta(), 0.01);
        assert_eq!(cfg.train.patience, 3);
    }

    #[test]
    fn partial_config_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"rounds": 3, "data": {"sim": {"env": {"n_prompts": 50}}}}"#).unwrap();
        let cfg = ExperimentConfig::load(
            &path,
            &[
                ("policy.policy".into(), "random".into()),
                ("policy.beta".into(), "0.5".into()),
                ("data.sim.val_prompts".into(), "7".into()),
                ("name".into(), "x y".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.policy.policy, Policy::Random);
        assert_eq!(cfg.policy.beta, Some(0.5));
        assert_eq!(cfg.name, "x y");
        match &cfg.data {
            DataSource::Sim(s) => {
                assert_eq!(s.env.n_prompts, 50);
                assert_eq!(s.val_prompts, 7);
            }
            _ => panic!("expected sim data"),
        }
        assert_eq!(cfg.label_mode(), LabelMode::Oracle);
        assert!(ExperimentConfig::load(&path, &[("bogus".into(), "1".into())]).is_err());
        assert!(ExperimentConfig::load(&path, &[("rounds.x".into(), "1".into())]).is_err());
    }

    #[test]
    fn rejects_invalid_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.policy.batch_size = 0;
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig { labels: LabelMode::Dataset, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
