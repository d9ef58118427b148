//! The active-learning loop: train, evaluate, score, acquire, label, repeat.
//!
//! A run directory holds `config.json`, `metrics.csv` (one row per round),
//! `batches/round_NNN.csv` manifests (round 0 is the initial set),
//! optional `checkpoints/round_NNN.ckpt`, `state.json` for resumption and
//! `run_summary.json`.

pub mod compare;
pub mod config;
pub mod metrics;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{self, AcquisitionBatch, AcquisitionError, PolicyConfig, Selection};
use crate::entropy::{EntropyError, EntropyState};
use crate::feature_store::{
    initial_split, load_dataset, FeatureDataset, FeatureStoreError, Format, PreferenceTuple, SplitState,
};
use crate::model::{evaluate_ll, save_checkpoint, train, Ensemble, ModelError, TrainConfig};
use crate::seeding;
use crate::sim::{HiddenRewards, SimError, SimWorld};
use crate::uncertainty::{score_pool, UncertaintyError};

pub use compare::{compare_runs, Curve, EfficiencyReport};
pub use config::{DataSource, ExperimentConfig, LabelMode};
pub use metrics::{batch_stats, read_metrics, write_metrics, BatchStats, RoundMetrics};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] FeatureStoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("label source: {0}")]
    Labels(String),
    #[error("timed out waiting for labels of round {round}")]
    LabelTimeout { round: usize },
    #[error("cannot resume: {0}")]
    Resume(String),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Supplies preference labels for tuples chosen by the loop.
pub trait LabelSource: Send {
    /// Labels for `tuples`, keyed by tuple id. Must cover every tuple.
    fn request(&mut self, round: usize, tuples: &[&PreferenceTuple]) -> Result<HashMap<String, bool>>;

    /// Called after each evaluated round.
    fn report(&mut self, _metrics: &RoundMetrics) {}

    /// Called once the run has finished.
    fn finish(&mut self) {}
}

/// Labels stored in the pool file, revealed only when requested.
pub struct DatasetLabels {
    labels: HashMap<String, bool>,
}

impl DatasetLabels {
    pub fn new(labels: HashMap<String, bool>) -> Self {
        Self { labels }
    }
}

impl LabelSource for DatasetLabels {
    fn request(&mut self, _round: usize, tuples: &[&PreferenceTuple]) -> Result<HashMap<String, bool>> {
        tuples
            .iter()
            .map(|t| {
                self.labels
                    .get(&t.tuple_id)
                    .map(|&l| (t.tuple_id.clone(), l))
                    .ok_or_else(|| HarnessError::Labels(format!("pool has no label for {:?}", t.tuple_id)))
            })
            .collect()
    }
}

/// Simulated annotator with access to the hidden rewards.
pub struct OracleLabels {
    world: SimWorld,
    hidden: HiddenRewards,
}

impl OracleLabels {
    pub fn new(world: SimWorld, hidden: HiddenRewards) -> Self {
        Self { world, hidden }
    }
}

impl LabelSource for OracleLabels {
    fn request(&mut self, _round: usize, tuples: &[&PreferenceTuple]) -> Result<HashMap<String, bool>> {
        Ok(self.world.label_all(tuples.iter().map(|t| t.tuple_id.as_str()), &self.hidden)?)
    }
}

/// Optional display texts for a tuple.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TupleTexts {
    pub prompt: Option<String>,
    pub completion1: Option<String>,
    pub completion2: Option<String>,
}

/// Pool, validation and test sets of an experiment. The pool carries no
/// labels; stored pool labels (dataset data) or the hidden rewards (sim
/// data) are kept aside for the label source.
pub struct ExperimentData {
    pub pool: FeatureDataset,
    pub val: FeatureDataset,
    pub test: FeatureDataset,
    pub pool_labels: Option<HashMap<String, bool>>,
    pub sim: Option<(SimWorld, HiddenRewards)>,
    pub texts: HashMap<String, TupleTexts>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    match &cfg.data {
        DataSource::Sim(s) => {
            let world = SimWorld::new(s.env.clone())?;
            let (pool, hidden) = world.generate("pool", s.env.n_prompts)?;
            let (val, _) = world.generate_labeled("val", s.val_prompts)?;
            let (test, _) = world.generate_labeled("test", s.test_prompts)?;
            Ok(ExperimentData { pool, val, test, pool_labels: None, sim: Some((world, hidden)), texts: HashMap::new() })
        }
        DataSource::Dataset(d) => {
            let load = |p: &PathBuf| load_dataset(p, Format::from_path(p));
            let pool = load(&d.pool)?;
            let labels: HashMap<String, bool> = pool
                .tuples()
                .iter()
                .filter_map(|t| t.label.map(|l| (t.tuple_id.clone(), l)))
                .collect();
            let (val, test) = (load(&d.val)?, load(&d.test)?);
            for set in [&val, &test] {
                if !set.is_labeled() {
                    return Err(HarnessError::Config(format!("{} must be fully labeled", set.name())));
                }
            }
            if val.d_c() != pool.d_c() || test.d_c() != pool.d_c() {
                return Err(HarnessError::Config("pool, val and test pair dimensions differ".into()));
            }
            let texts = match &d.texts {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => HashMap::new(),
            };
            Ok(ExperimentData { pool: pool.without_labels(), val, test, pool_labels: Some(labels), sim: None, texts })
        }
    }
}

/// The label source implied by the config for non-service modes.
pub fn default_label_source(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Box<dyn LabelSource>> {
    match cfg.label_mode() {
        LabelMode::Oracle => {
            let (world, hidden) = data
                .sim
                .clone()
                .ok_or_else(|| HarnessError::Config("oracle labels need sim data".into()))?;
            Ok(Box::new(OracleLabels::new(world, hidden)))
        }
        LabelMode::Dataset => Ok(Box::new(DatasetLabels::new(data.pool_labels.clone().unwrap_or_default()))),
        LabelMode::Service => Err(HarnessError::Config("service labels need a running label service".into())),
        LabelMode::Auto => unreachable!("resolved by label_mode"),
    }
}

/// Everything needed to continue a run after round `next_round - 1`, next to
/// `metrics.csv` and the manifest of the batch added last. Scores stay in the
/// CSV files, which keep floats exact and allow infinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub next_round: usize,
    pub split: SplitState,
    pub labels: BTreeMap<String, bool>,
    pub pool_exhausted: bool,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds_completed: usize,
    pub labels_used: usize,
    pub pool_exhausted: bool,
    pub finished: bool,
    pub final_test_ll: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `state.json` in the run directory.
    pub resume: bool,
    /// Return after this round has been completed, as if interrupted.
    pub stop_after_round: Option<usize>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn manifest_path(out: &Path, round: usize) -> PathBuf {
    out.join("batches").join(format!("round_{round:03}.csv"))
}

/// Distinct pool prompts weighted by how many tuples carry them.
fn weighted_prompts(pool: &FeatureDataset) -> (Vec<(String, Vec<f32>)>, Vec<u32>) {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut prompts = Vec::new();
    let mut weights = Vec::new();
    for t in pool.tuples() {
        match index.get(t.prompt_id.as_str()) {
            Some(&i) => weights[i] += 1,
            None => {
                index.insert(&t.prompt_id, prompts.len());
                prompts.push((t.prompt_id.clone(), t.prompt_vec.clone()));
                weights.push(1u32);
            }
        }
    }
    (prompts, weights)
}

fn entropy_state(cfg: &ExperimentConfig, pool: &FeatureDataset, out: &Path) -> Result<EntropyState> {
    let (prompts, weights) = weighted_prompts(pool);
    let cache = cfg.knn_cache.clone().unwrap_or_else(|| out.join("knn.bin"));
    if cache.exists() {
        match EntropyState::load_cached(prompts.clone(), cfg.policy.entropy, &cache) {
            Ok(s) => return Ok(s),
            Err(e) => tracing::warn!(error = %e, "ignoring kNN cache"),
        }
    }
    let state = EntropyState::build_weighted(prompts, &weights, cfg.policy.entropy)?;
    state.save_cache(&cache)?;
    Ok(state)
}

fn selections_of(tuples: &[&PreferenceTuple]) -> Vec<Selection> {
    tuples
        .iter()
        .map(|t| Selection {
            tuple_id: t.tuple_id.clone(),
            prompt_id: t.prompt_id.clone(),
            u_score: None,
            e_score: None,
            combined: 0.0,
        })
        .collect()
}

/// Run (or resume) the experiment described by `cfg`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    source: &mut dyn LabelSource,
    opts: &RunOptions,
) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(out.join("batches"))?;
    if cfg.save_checkpoints {
        fs::create_dir_all(out.join("checkpoints"))?;
    }
    let config_path = out.join("config.json");
    let state_path = out.join("state.json");
    let (mut state, mut rows, mut last_batch) = if opts.resume && state_path.exists() {
        let saved: ExperimentConfig = serde_json::from_str(&fs::read_to_string(&config_path)?)?;
        if &saved != cfg {
            return Err(HarnessError::Resume("config differs from the one the run started with".into()));
        }
        let state: RunState = serde_json::from_str(&fs::read_to_string(&state_path)?)?;
        let mut rows = read_metrics(fs::File::open(out.join("metrics.csv"))?)?;
        rows.retain(|r| r.round < state.next_round || state.finished);
        let last = AcquisitionBatch::read_manifest(
            cfg.policy.policy,
            state.next_round,
            fs::File::open(manifest_path(&out, state.next_round))?,
        )?;
        (state, rows, last.selections)
    } else {
        write_atomic(&config_path, serde_json::to_string_pretty(cfg)?.as_bytes())?;
        let split = initial_split(&data.pool, cfg.init_train_size, seeding::derive(cfg.seed, "split", 0))?;
        let init: Vec<&PreferenceTuple> = split.train_ids.iter().map(|id| data.pool.get(id).expect("split id")).collect();
        let labels = checked_labels(source.request(0, &init)?, &init)?;
        let last_batch = selections_of(&init);
        write_manifest(&out, &AcquisitionBatch { policy: cfg.policy.policy, round: 0, selections: last_batch.clone() })?;
        let state = RunState { next_round: 0, split, labels: labels.into_iter().collect(), pool_exhausted: false, finished: false };
        (state, Vec::new(), last_batch)
    };

    let mut entropy = if cfg.policy.policy.needs_entropy() && !state.finished {
        Some(entropy_state(cfg, &data.pool, &out)?)
    } else {
        None
    };
    let hidden = &cfg.model.hidden;

    while !state.finished {
        let t = state.next_round;
        let started = Instant::now();
        let labels: HashMap<String, bool> = state.labels.iter().map(|(k, v)| (k.clone(), *v)).collect();
        let train_set = data.pool.subset("train", &state.split.train_ids)?.with_labels(&labels);

        let init = Ensemble::new(cfg.model.ensemble_size, data.pool.d_c(), hidden, seeding::derive(cfg.seed, "model_init", t as u64))?;
        let train_cfg = TrainConfig { seed: seeding::derive(cfg.seed, "train", t as u64), ..cfg.train.clone() };
        let (ens, _history) = train(&init, &train_set, Some(&data.val), &train_cfg)?;
        if cfg.save_checkpoints {
            save_checkpoint(&ens, &out.join("checkpoints").join(format!("round_{t:03}.ckpt")))?;
        }

        let last_round = t == cfg.rounds || state.split.pool_ids.is_empty();
        let test_ll = if t % cfg.eval_every == 0 || last_round { Some(evaluate_ll(&ens, &data.test)?) } else { None };
        let val_ll = Some(evaluate_ll(&ens, &data.val)?);

        let history: Vec<Vec<&str>> = vec![
            state.split.train_ids[..state.split.train_ids.len() - last_batch.len()]
                .iter()
                .map(|id| data.pool.get(id).expect("train id").prompt_id.as_str())
                .collect(),
            last_batch.iter().map(|s| s.prompt_id.as_str()).collect(),
        ];
        let stats = batch_stats(&history);
        let (mean_u, mean_e, first_ratio) = metrics::score_summary(&last_batch, cfg.policy.beta());
        let row = RoundMetrics {
            round: t,
            labels_used: state.split.train_ids.len(),
            test_mean_ll: test_ll,
            val_mean_ll: val_ll,
            unique_prompt_ratio_batch: stats.per_batch[1],
            unique_prompt_ratio_cumulative: stats.cumulative[1],
            mean_u_score: mean_u,
            mean_e_score: mean_e,
            first_pick_score_ratio: first_ratio,
            wall_time_s: None,
        };
        source.report(&row);
        rows.push(row);

        if last_round {
            state.pool_exhausted = t < cfg.rounds;
            if state.pool_exhausted {
                tracing::warn!(round = t, "pool exhausted before the last round");
            }
            state.finished = true;
        } else {
            let pool: Vec<&PreferenceTuple> = state.split.pool_ids.iter().map(|id| data.pool.get(id).expect("pool id")).collect();
            let scores = if cfg.policy.policy.needs_scores() {
                let s = score_pool(&ens, pool.par_iter().copied())?;
                Some(s.iter().map(|s| s.get(cfg.policy.uncertainty)).collect::<Vec<f64>>())
            } else {
                None
            };
            if let Some(st) = entropy.as_mut() {
                let acquired: Vec<&str> = state
                    .split
                    .train_ids
                    .iter()
                    .map(|id| data.pool.get(id).expect("train id").prompt_id.as_str())
                    .collect();
                st.init_counts_by_id(&acquired)?;
            }
            let policy_cfg = PolicyConfig { seed: seeding::derive(cfg.seed, "policy", t as u64), ..cfg.policy.clone() };
            let batch = acquisition::acquire(&policy_cfg, t + 1, &pool, scores.as_deref(), entropy.as_mut())?;
            write_manifest(&out, &batch)?;
            let picked: Vec<&PreferenceTuple> = batch.selections.iter().map(|s| data.pool.get(&s.tuple_id).expect("pool id")).collect();
            let new_labels = checked_labels(source.request(t + 1, &picked)?, &picked)?;
            state.split.acquire(&batch.tuple_ids())?;
            state.labels.extend(new_labels);
            last_batch = batch.selections;
            state.next_round = t + 1;
        }

        if cfg.log_wall_time {
            rows.last_mut().expect("row pushed").wall_time_s = Some(started.elapsed().as_secs_f64());
        }
        let mut csv = Vec::new();
        write_metrics(&rows, &mut csv)?;
        write_atomic(&out.join("metrics.csv"), &csv)?;
        write_atomic(&state_path, serde_json::to_string(&state)?.as_bytes())?;
        tracing::info!(round = t, labels = state.split.train_ids.len(), test_ll = ?test_ll, "round complete");

        if opts.stop_after_round == Some(t) && !state.finished {
            break;
        }
    }

    if state.finished {
        source.finish();
    }
    let summary = RunSummary {
        rounds_completed: rows.last().map(|m| m.round).unwrap_or(0),
        labels_used: state.split.train_ids.len(),
        pool_exhausted: state.pool_exhausted,
        finished: state.finished,
        final_test_ll: rows.iter().rev().find_map(|m| m.test_mean_ll),
    };
    write_atomic(&out.join("run_summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

fn checked_labels(labels: HashMap<String, bool>, tuples: &[&PreferenceTuple]) -> Result<HashMap<String, bool>> {
    let mut out = HashMap::with_capacity(tuples.len());
    for t in tuples {
        let l = labels
            .get(&t.tuple_id)
            .ok_or_else(|| HarnessError::Labels(format!("no label returned for {:?}", t.tuple_id)))?;
        out.insert(t.tuple_id.clone(), *l);
    }
    Ok(out)
}

fn write_manifest(out: &Path, batch: &AcquisitionBatch) -> Result<()> {
    let mut buf = Vec::new();
    batch.write_manifest(&mut buf)?;
    write_atomic(&manifest_path(out, batch.round), &buf)
}

/// Per-round unique-prompt statistics from the manifests of a run directory.
pub fn history_stats(run_dir: &Path) -> Result<BatchStats> {
    let mut rounds: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(run_dir.join("batches"))? {
        let path = entry?.path();
        let round = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("round_"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(r) = round {
            rounds.push((r, path));
        }
    }
    rounds.sort();
    let mut history = Vec::new();
    for (_, path) in rounds {
        let mut rdr = csv::Reader::from_path(&path)?;
        let col = rdr
            .headers()?
            .iter()
            .position(|h| h == "prompt_id")
            .ok_or_else(|| HarnessError::Config(format!("{} has no prompt_id column", path.display())))?;
        let batch = rdr
            .records()
            .map(|r| r.map(|r| r[col].to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        history.push(batch);
    }
    Ok(batch_stats(&history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::Policy;
    use crate::harness::config::SimData;
    use crate::sim::{CompletionsPerPrompt, FeatureLift, SimConfig};

    fn tiny(out: &Path, policy: Policy, rounds: usize) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Sim(SimData {
                env: SimConfig {
                    n_prompts: 30,
                    completions_per_prompt: CompletionsPerPrompt::Fixed(2),
                    feature_lift: FeatureLift::Raw,
                    ..Default::default()
                },
                val_prompts: 20,
                test_prompts: 20,
            }),
            policy: PolicyConfig {
                policy,
                batch_size: 5,
                entropy: crate::entropy::EntropyConfig { k: 3, d_x: 1.0 },
                ..Default::default()
            },
            train: TrainConfig { learning_rate: 1e-2, max_epochs: 5, ..Default::default() },
            model: config::ModelConfig { ensemble_size: 3, hidden: vec![4] },
            rounds,
            init_train_size: 5,
            output_dir: out.to_path_buf(),
            ..Default::default()
        }
    }

    fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> RunSummary {
        let data = load_data(cfg).unwrap();
        let mut src = default_label_source(cfg, &data).unwrap();
        run_experiment(cfg, &data, src.as_mut(), opts).unwrap()
    }

    #[test]
    fn zero_rounds_evaluates_initial_set_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), Policy::Random, 0);
        let s = run(&cfg, &RunOptions::default());
        assert!(s.finished && !s.pool_exhausted);
        let rows = read_metrics(fs::File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].labels_used, 5);
        assert!(rows[0].test_mean_ll.is_some());
    }

    #[test]
    fn label_accounting_and_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), Policy::Balpm, 3);
        run(&cfg, &RunOptions::default());
        let rows = read_metrics(fs::File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
        let used: Vec<usize> = rows.iter().map(|r| r.labels_used).collect();
        assert_eq!(used, vec![5, 10, 15, 20]);
        let stats = history_stats(dir.path()).unwrap();
        assert_eq!(stats.per_batch.len(), 4);
        assert!(rows[1].mean_e_score.is_some() && rows[1].mean_u_score.is_some());
        assert!(dir.path().join("knn.bin").exists());
        let state: RunState = serde_json::from_str(&fs::read_to_string(dir.path().join("state.json")).unwrap()).unwrap();
        let mut ids = state.split.train_ids.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn exhaustion_finishes_gracefully() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path(), Policy::Bald, 50);
        cfg.policy.batch_size = 25;
        let s = run(&cfg, &RunOptions::default());
        assert!(s.pool_exhausted && s.finished);
        assert_eq!(s.labels_used, 60);
        assert_eq!(s.rounds_completed, 3);
    }

    #[test]
    fn resume_reproduces_and_config_must_match() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&tiny(a.path(), Policy::Balpm, 3), &RunOptions::default());
        let cfg_b = tiny(b.path(), Policy::Balpm, 3);
        let partial = run(&cfg_b, &RunOptions { stop_after_round: Some(1), ..Default::default() });
        assert!(!partial.finished);
        run(&cfg_b, &RunOptions { resume: true, ..Default::default() });
        let read = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        let mut other = cfg_b.clone();
        other.seed = 9;
        let data = load_data(&other).unwrap();
        let mut src = default_label_source(&other, &data).unwrap();
        assert!(matches!(
            run_experiment(&other, &data, src.as_mut(), &RunOptions { resume: true, ..Default::default() }),
            Err(HarnessError::Resume(_))
        ));
    }
}
