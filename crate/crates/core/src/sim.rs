//! Synthetic preference environment with a known reward.
//!
//! Prompts `x` and completions `y` are scalars drawn from U[0, 1]; the true
//! reward is the Gaussian density `r(x, y) = N(x + y | μ, σ)` and labels follow
//! the Bradley-Terry model on it. Features seen by the engine are either the
//! raw scalars or the raw scalars concatenated with fixed random tanh
//! projections of them.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{id_hash, FeatureDataset, FeatureStoreError, PreferenceTuple};
use crate::model::{bt_probability, Ensemble};
use crate::seeding;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] FeatureStoreError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("no hidden reward for tuple {0:?}")]
    UnknownTuple(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionsPerPrompt {
    Fixed(usize),
    /// Inclusive range, drawn per prompt.
    Uniform { min: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLift {
    Raw,
    /// Raw inputs followed by `dim` features `tanh(w·v + b)` with `w, b`
    /// drawn once from `seed`.
    RandomProjection { dim: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelNoise {
    #[default]
    BtSample,
    /// Prefer the higher true reward; ties go to completion 1.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub mu: f64,
    pub sigma: f64,
    pub n_prompts: usize,
    pub completions_per_prompt: CompletionsPerPrompt,
    pub feature_lift: FeatureLift,
    pub label_noise: LabelNoise,
    pub best_of_n: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            sigma: 0.4,
            n_prompts: 1000,
            completions_per_prompt: CompletionsPerPrompt::Fixed(4),
            feature_lift: FeatureLift::RandomProjection { dim: 8, seed: 7 },
            label_noise: LabelNoise::BtSample,
            best_of_n: 16,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || !self.mu.is_finite() {
            return bad("sigma must be > 0 and mu finite");
        }
        if self.best_of_n == 0 {
            return bad("best_of_n must be >= 1");
        }
        match self.completions_per_prompt {
            CompletionsPerPrompt::Fixed(0) => return bad("completions_per_prompt must be >= 1"),
            CompletionsPerPrompt::Uniform { min, max } if min == 0 || min > max => {
                return bad("completions_per_prompt range must satisfy 1 <= min <= max")
            }
            _ => {}
        }
        if let FeatureLift::RandomProjection { dim: 0, .. } = self.feature_lift {
            return bad("projection dim must be >= 1");
        }
        Ok(())
    }
}

/// Gaussian density of `x + y`.
pub fn gaussian_reward(x: f64, y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x + y - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Label for a tuple with true rewards `r1, r2`. In `BtSample` mode the coin
/// is drawn from a stream keyed by the tuple id, so a tuple always gets the
/// same label for a given seed.
pub fn label_oracle(tuple_id: &str, r1: f64, r2: f64, mode: LabelNoise, seed: u64) -> bool {
    match mode {
        LabelNoise::Deterministic => r1 >= r2,
        LabelNoise::BtSample => {
            let mut rng = seeding::rng(seed, "label", id_hash(tuple_id));
            rng.random::<f64>() < bt_probability(r1, r2)
        }
    }
}

#[derive(Debug, Clone)]
struct Projection {
    /// Row-major `dim × input`.
    w: Vec<f64>,
    b: Vec<f64>,
    input: usize,
}

impl Projection {
    fn new(input: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let wd = Uniform::new_inclusive(-3.0, 3.0).expect("valid range");
        let bd = Uniform::new_inclusive(-1.5, 1.5).expect("valid range");
        Self {
            w: (0..dim * input).map(|_| wd.sample(rng)).collect(),
            b: (0..dim).map(|_| bd.sample(rng)).collect(),
            input,
        }
    }

    fn lift(&self, v: &[f64]) -> Vec<f32> {
        let mut out: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        for (row, b) in self.w.chunks_exact(self.input).zip(&self.b) {
            let z: f64 = row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() + b;
            out.push(z.tanh() as f32);
        }
        out
    }
}

/// True rewards of one generated tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenReward {
    pub tuple_id: String,
    pub r1: f64,
    pub r2: f64,
}

/// Hidden reward table, kept apart from the features the engine reads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HiddenRewards {
    rows: Vec<HiddenReward>,
    by_id: HashMap<String, usize>,
}

impl HiddenRewards {
    pub fn from_rows(rows: Vec<HiddenReward>) -> Self {
        let by_id = rows.iter().enumerate().map(|(i, r)| (r.tuple_id.clone(), i)).collect();
        Self { rows, by_id }
    }

    pub fn get(&self, tuple_id: &str) -> Option<&HiddenReward> {
        self.by_id.get(tuple_id).map(|&i| &self.rows[i])
    }

    pub fn rows(&self) -> &[HiddenReward] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV `tuple_id,r1,r2`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<Result<Vec<HiddenReward>, _>>()?;
        Ok(Self::from_rows(rows))
    }
}

/// A generated environment: fixed feature maps plus the reward.
#[derive(Debug, Clone)]
pub struct SimWorld {
    cfg: SimConfig,
    prompt_proj: Option<Projection>,
    pair_proj: Option<Projection>,
}

impl SimWorld {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let (prompt_proj, pair_proj) = match cfg.feature_lift {
            FeatureLift::Raw => (None, None),
            FeatureLift::RandomProjection { dim, seed } => {
                let mut rng = seeding::rng(seed, "projection", 0);
                let p = Projection::new(1, dim, &mut rng);
                let c = Projection::new(2, dim, &mut rng);
                (Some(p), Some(c))
            }
        };
        Ok(Self { cfg, prompt_proj, pair_proj })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn reward(&self, x: f64, y: f64) -> f64 {
        gaussian_reward(x, y, self.cfg.mu, self.cfg.sigma)
    }

    pub fn prompt_features(&self, x: f64) -> Vec<f32> {
        match &self.prompt_proj {
            None => vec![x as f32],
            Some(p) => p.lift(&[x]),
        }
    }

    pub fn pair_features(&self, x: f64, y: f64) -> Vec<f32> {
        match &self.pair_proj {
            None => vec![x as f32, y as f32],
            Some(p) => p.lift(&[x, y]),
        }
    }

    /// Generate `n_prompts` prompts with their tuples, unlabeled. `tag`
    /// separates independent sets (pool, validation, test) drawn from one
    /// seed; ids are 16 hex digits.
    pub fn generate(&self, tag: &str, n_prompts: usize) -> Result<(FeatureDataset, HiddenRewards)> {
        let mut rng = seeding::rng(self.cfg.seed, tag, 0);
        let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
        let mut tuples = Vec::new();
        let mut hidden = Vec::new();
        for p in 0..n_prompts {
            let x = unit.sample(&mut rng);
            let m = match self.cfg.completions_per_prompt {
                CompletionsPerPrompt::Fixed(m) => m,
                CompletionsPerPrompt::Uniform { min, max } => rng.random_range(min..=max),
            };
            let prompt_id = format!("{:016x}", seeding::derive(self.cfg.seed, &format!("{tag}/prompt"), p as u64));
            let prompt_vec = self.prompt_features(x);
            for _ in 0..m {
                let (y1, y2) = (unit.sample(&mut rng), unit.sample(&mut rng));
                let tuple_id = format!(
                    "{:016x}",
                    seeding::derive(self.cfg.seed, &format!("{tag}/tuple"), tuples.len() as u64)
                );
                hidden.push(HiddenReward {
                    tuple_id: tuple_id.clone(),
                    r1: self.reward(x, y1),
                    r2: self.reward(x, y2),
                });
                tuples.push(PreferenceTuple {
                    tuple_id,
                    prompt_id: prompt_id.clone(),
                    prompt_vec: prompt_vec.clone(),
                    pair1_vec: self.pair_features(x, y1),
                    pair2_vec: self.pair_features(x, y2),
                    label: None,
                });
            }
        }
        Ok((FeatureDataset::new(tag, tuples)?, HiddenRewards::from_rows(hidden)))
    }

    /// Same as [`generate`](Self::generate) with oracle labels attached.
    pub fn generate_labeled(&self, tag: &str, n_prompts: usize) -> Result<(FeatureDataset, HiddenRewards)> {
        let (ds, hidden) = self.generate(tag, n_prompts)?;
        let labels = self.label_all(ds.tuples().iter().map(|t| t.tuple_id.as_str()), &hidden)?;
        Ok((ds.with_labels(&labels), hidden))
    }

    pub fn label(&self, tuple_id: &str, hidden: &HiddenRewards) -> Result<bool> {
        let h = hidden
            .get(tuple_id)
            .ok_or_else(|| SimError::UnknownTuple(tuple_id.to_string()))?;
        Ok(label_oracle(tuple_id, h.r1, h.r2, self.cfg.label_noise, self.cfg.seed))
    }

    pub fn label_all<'a, I>(&self, ids: I, hidden: &HiddenRewards) -> Result<HashMap<String, bool>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        ids.into_iter()
            .map(|id| Ok((id.to_string(), self.label(id, hidden)?)))
            .collect()
    }
}

/// The pool described by `cfg`, tagged `"pool"`.
pub fn generate_pool(cfg: &SimConfig) -> Result<(FeatureDataset, HiddenRewards)> {
    SimWorld::new(cfg.clone())?.generate("pool", cfg.n_prompts)
}

/// Anything that ranks completions `y` for a prompt `x`.
pub trait RewardScorer: Sync {
    fn score(&self, world: &SimWorld, x: f64, y: f64) -> f64;
}

/// The true reward.
pub struct GroundTruth;

impl RewardScorer for GroundTruth {
    fn score(&self, world: &SimWorld, x: f64, y: f64) -> f64 {
        world.reward(x, y)
    }
}

/// Mean latent reward of a preference ensemble on the pair features.
pub struct EnsembleScorer<'a>(pub &'a Ensemble);

impl RewardScorer for EnsembleScorer<'_> {
    fn score(&self, world: &SimWorld, x: f64, y: f64) -> f64 {
        self.0.mean_reward(&world.pair_features(x, y))
    }
}

/// Scores unrelated to the input: a hash of its bits.
pub struct NoiseScorer(pub u64);

impl RewardScorer for NoiseScorer {
    fn score(&self, _: &SimWorld, x: f64, y: f64) -> f64 {
        let h = seeding::derive(self.0 ^ x.to_bits(), "noise", y.to_bits());
        (h >> 11) as f64
    }
}

/// Fraction of evaluation prompts where the best of `n` uniform candidates
/// (according to `scorer`) beats one uniform base completion under the true
/// reward.
pub fn best_of_n_winrate<S: RewardScorer + ?Sized>(
    world: &SimWorld,
    scorer: &S,
    n: usize,
    n_eval_prompts: usize,
    seed: u64,
) -> f64 {
    if n_eval_prompts == 0 {
        return 0.0;
    }
    let n = n.max(1);
    let wins: usize = (0..n_eval_prompts)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::rng(seed, "best_of_n", i as u64);
            let x: f64 = rng.random();
            let mut best = (f64::NEG_INFINITY, 0.0);
            for _ in 0..n {
                let y: f64 = rng.random();
                let s = scorer.score(world, x, y);
                if s > best.0 {
                    best = (s, y);
                }
            }
            let base: f64 = rng.random();
            usize::from(world.reward(x, best.1) > world.reward(x, base))
        })
        .sum();
    wins as f64 / n_eval_prompts as f64
}
