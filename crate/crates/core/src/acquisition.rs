//! Batch acquisition policies.
//!
//! BAL-PM builds its batch greedily: each step takes the remaining tuple
//! maximizing `u + β·e(x)`, where `u` is the tuple's uncertainty score (fixed
//! for the whole batch) and `e(x)` the entropy term of its prompt, then
//! updates the prompt counts before the next step. The baselines rank or
//! sample by `u` alone. Ties always go to the lowest `tuple_id`.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{EntropyConfig, EntropyState};
use crate::feature_store::PreferenceTuple;
use crate::seeding;
use crate::uncertainty::UncertaintyKind;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("{scores} scores for a pool of {pool}")]
    LengthMismatch { pool: usize, scores: usize },
    #[error("policy {0} needs uncertainty scores")]
    MissingScores(Policy),
    #[error("policy {0} needs an entropy state")]
    MissingEntropyState(Policy),
    #[error("prompt {0:?} is not in the entropy state")]
    UnknownPrompt(String),
    #[error("non-finite uncertainty score for {0:?}")]
    NonFiniteScore(String),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = AcquisitionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Random,
    Bald,
    SoftmaxBald,
    PowerBald,
    SoftrankBald,
    Balpm,
    BalpmNoUncertainty,
    BalpmNoEntropy,
}

impl Policy {
    pub const ALL: [Policy; 8] = [
        Policy::Random,
        Policy::Bald,
        Policy::SoftmaxBald,
        Policy::PowerBald,
        Policy::SoftrankBald,
        Policy::Balpm,
        Policy::BalpmNoUncertainty,
        Policy::BalpmNoEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::Bald => "bald",
            Policy::SoftmaxBald => "softmax_bald",
            Policy::PowerBald => "power_bald",
            Policy::SoftrankBald => "softrank_bald",
            Policy::Balpm => "balpm",
            Policy::BalpmNoUncertainty => "balpm_no_uncertainty",
            Policy::BalpmNoEntropy => "balpm_no_entropy",
        }
    }

    /// β used when the config leaves it unset.
    pub fn default_beta(self) -> f64 {
        match self {
            Policy::SoftmaxBald => 10_000.0,
            Policy::PowerBald => 8.0,
            Policy::SoftrankBald => 1.0,
            _ => 0.01,
        }
    }

    pub fn needs_scores(self) -> bool {
        !matches!(self, Policy::Random | Policy::BalpmNoUncertainty)
    }

    pub fn needs_entropy(self) -> bool {
        matches!(self, Policy::Balpm | Policy::BalpmNoUncertainty)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = AcquisitionError;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| AcquisitionError::InvalidConfig(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub policy: Policy,
    /// Entropy weight for BAL-PM, temperature-like exponent for the
    /// stochastic baselines. `None` picks [`Policy::default_beta`].
    pub beta: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub uncertainty: UncertaintyKind,
    pub entropy: EntropyConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Balpm,
            beta: None,
            batch_size: 320,
            seed: 0,
            uncertainty: UncertaintyKind::Epistemic,
            entropy: EntropyConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| self.policy.default_beta())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AcquisitionError::InvalidConfig("batch_size must be >= 1".into()));
        }
        let beta = self.beta();
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(AcquisitionError::InvalidConfig(format!("beta must be finite and >= 0, got {beta}")));
        }
        if self.entropy.k == 0 || !(self.entropy.d_x > 0.0 && self.entropy.d_x.is_finite()) {
            return Err(AcquisitionError::InvalidConfig("entropy.k >= 1 and entropy.d_x > 0 required".into()));
        }
        Ok(())
    }
}

/// One pick with the scores it was chosen under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub tuple_id: String,
    pub prompt_id: String,
    pub u_score: Option<f64>,
    /// Entropy term of the prompt at the moment of selection.
    pub e_score: Option<f64>,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionBatch {
    pub policy: Policy,
    pub round: usize,
    pub selections: Vec<Selection>,
}

impl AcquisitionBatch {
    pub fn tuple_ids(&self) -> Vec<String> {
        self.selections.iter().map(|s| s.tuple_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }

    /// Manifest CSV: `position,tuple_id,prompt_id,u_score,e_score,combined`.
    pub fn write_manifest<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["position", "tuple_id", "prompt_id", "u_score", "e_score", "combined"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (i, s) in self.selections.iter().enumerate() {
            wtr.write_record([
                i.to_string(),
                s.tuple_id.clone(),
                s.prompt_id.clone(),
                opt(s.u_score),
                opt(s.e_score),
                s.combined.to_string(),
            ])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Inverse of [`write_manifest`](Self::write_manifest).
    pub fn read_manifest<R: std::io::Read>(policy: Policy, round: usize, r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let bad = |m: String| AcquisitionError::InvalidConfig(format!("manifest: {m}"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let mut selections = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 6 || rec[0].parse::<usize>().ok() != Some(selections.len()) {
                return Err(bad(format!("malformed row {}", selections.len())));
            }
            selections.push(Selection {
                tuple_id: rec[1].to_string(),
                prompt_id: rec[2].to_string(),
                u_score: opt(&rec[3])?,
                e_score: opt(&rec[4])?,
                combined: num(&rec[5])?,
            });
        }
        Ok(Self { policy, round, selections })
    }
}

/// Greater score first, then lower id.
fn rank_cmp(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn check_scores(pool: &[&PreferenceTuple], u: &[f64]) -> Result<()> {
    if pool.is_empty() {
        return Err(AcquisitionError::EmptyPool);
    }
    if u.len() != pool.len() {
        return Err(AcquisitionError::LengthMismatch { pool: pool.len(), scores: u.len() });
    }
    if let Some(i) = u.iter().position(|s| !s.is_finite()) {
        return Err(AcquisitionError::NonFiniteScore(pool[i].tuple_id.clone()));
    }
    Ok(())
}

fn plain(t: &PreferenceTuple, u: Option<f64>, combined: f64) -> Selection {
    Selection {
        tuple_id: t.tuple_id.clone(),
        prompt_id: t.prompt_id.clone(),
        u_score: u,
        e_score: None,
        combined,
    }
}

/// Uniform sample of `b` tuples without replacement, in draw order.
pub fn acquire_random(pool: &[&PreferenceTuple], b: usize, seed: u64) -> Result<Vec<Selection>> {
    if pool.is_empty() {
        return Err(AcquisitionError::EmptyPool);
    }
    let mut rng = seeding::rng(seed, "acquire_random", 0);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), b.min(pool.len()));
    Ok(picks.into_iter().map(|i| plain(pool[i], None, 0.0)).collect())
}

/// Top-`b` by score.
pub fn acquire_bald(pool: &[&PreferenceTuple], u: &[f64], b: usize) -> Result<Vec<Selection>> {
    check_scores(pool, u)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&i, &j| rank_cmp((u[i], &pool[i].tuple_id), (u[j], &pool[j].tuple_id)));
    Ok(order
        .into_iter()
        .take(b)
        .map(|i| plain(pool[i], Some(u[i]), u[i]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StochasticVariant {
    /// weight ∝ exp(β·s)
    Softmax,
    /// weight ∝ s^β, with s floored at [`POWER_FLOOR`]
    Power,
    /// weight ∝ rank^(−β), rank 1 = highest score
    SoftRank,
}

pub const POWER_FLOOR: f64 = 1e-12;

/// Sample `b` distinct tuples, each step proportional to the variant's
/// weight among those remaining. Implemented as top-`b` of log-weights
/// perturbed by Gumbel noise, which has the same distribution as sequential
/// sampling with renormalization.
pub fn acquire_stochastic(
    pool: &[&PreferenceTuple],
    u: &[f64],
    b: usize,
    variant: StochasticVariant,
    beta: f64,
    seed: u64,
) -> Result<Vec<Selection>> {
    check_scores(pool, u)?;
    let log_w: Vec<f64> = match variant {
        StochasticVariant::Softmax => u.iter().map(|&s| beta * s).collect(),
        StochasticVariant::Power => u
            .iter()
            .map(|&s| if beta == 0.0 { 0.0 } else { beta * s.max(POWER_FLOOR).ln() })
            .collect(),
        StochasticVariant::SoftRank => {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.sort_by(|&i, &j| rank_cmp((u[i], &pool[i].tuple_id), (u[j], &pool[j].tuple_id)));
            let mut lw = vec![0.0; pool.len()];
            for (r, &i) in order.iter().enumerate() {
                lw[i] = -beta * ((r + 1) as f64).ln();
            }
            lw
        }
    };
    let mut rng = seeding::rng(seed, "acquire_stochastic", 0);
    let keys: Vec<f64> = log_w
        .iter()
        .map(|&lw| {
            let v: f64 = rng.sample(Open01);
            lw - (-v.ln()).ln()
        })
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&i, &j| rank_cmp((keys[i], &pool[i].tuple_id), (keys[j], &pool[j].tuple_id)));
    Ok(order
        .into_iter()
        .take(b)
        .map(|i| plain(pool[i], Some(u[i]), u[i]))
        .collect())
}

/// Which terms of the BAL-PM objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalpmTerms {
    Both,
    UncertaintyOnly,
    EntropyOnly,
}

/// Greedy BAL-PM batch. `state` must hold counts for the current train set;
/// it is advanced as tuples are picked. `u` may be empty for
/// [`BalpmTerms::EntropyOnly`].
pub fn acquire_balpm(
    pool: &[&PreferenceTuple],
    u: &[f64],
    state: &mut EntropyState,
    beta: f64,
    b: usize,
    terms: BalpmTerms,
) -> Result<Vec<Selection>> {
    if pool.is_empty() {
        return Err(AcquisitionError::EmptyPool);
    }
    let zeros;
    let u = if terms == BalpmTerms::EntropyOnly && u.is_empty() {
        zeros = vec![0.0; pool.len()];
        &zeros[..]
    } else {
        check_scores(pool, u)?;
        u
    };
    let prompt_of = pool
        .iter()
        .map(|t| {
            state
                .prompt_index(&t.prompt_id)
                .ok_or_else(|| AcquisitionError::UnknownPrompt(t.prompt_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut e: Vec<f64> = (0..state.len()).map(|i| state.entropy_term(i)).collect();
    let combine = |u: f64, e: f64| match terms {
        BalpmTerms::Both if beta == 0.0 => u,
        BalpmTerms::Both => u + beta * e,
        BalpmTerms::UncertaintyOnly => u,
        BalpmTerms::EntropyOnly => e,
    };
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(b.min(pool.len()));
    for _ in 0..b.min(pool.len()) {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..pool.len() {
            if taken[j] {
                continue;
            }
            let c = combine(u[j], e[prompt_of[j]]);
            let better = match best {
                None => true,
                Some((bj, bc)) => {
                    rank_cmp((c, &pool[j].tuple_id), (bc, &pool[bj].tuple_id)) == Ordering::Less
                }
            };
            if better {
                best = Some((j, c));
            }
        }
        let (j, c) = best.expect("remaining pool is non-empty");
        taken[j] = true;
        let p = prompt_of[j];
        out.push(Selection {
            tuple_id: pool[j].tuple_id.clone(),
            prompt_id: pool[j].prompt_id.clone(),
            u_score: (terms != BalpmTerms::EntropyOnly).then_some(u[j]),
            e_score: Some(e[p]),
            combined: c,
        });
        state.increment_index(p);
        for &x in state.influence(p) {
            e[x as usize] = state.entropy_term(x as usize);
        }
    }
    Ok(out)
}

/// Run the configured policy for one round. `scores` are the per-tuple
/// uncertainty scores aligned with `pool`; `state` must already hold the
/// counts of the current train set for the BAL-PM variants.
pub fn acquire(
    cfg: &PolicyConfig,
    round: usize,
    pool: &[&PreferenceTuple],
    scores: Option<&[f64]>,
    state: Option<&mut EntropyState>,
) -> Result<AcquisitionBatch> {
    cfg.validate()?;
    let policy = cfg.policy;
    let b = cfg.batch_size;
    let beta = cfg.beta();
    let seed = seeding::derive(cfg.seed, "acquire", round as u64);
    let scores = || scores.ok_or(AcquisitionError::MissingScores(policy));
    let selections = match policy {
        Policy::Random => acquire_random(pool, b, seed)?,
        Policy::Bald | Policy::BalpmNoEntropy => acquire_bald(pool, scores()?, b)?,
        Policy::SoftmaxBald => acquire_stochastic(pool, scores()?, b, StochasticVariant::Softmax, beta, seed)?,
        Policy::PowerBald => acquire_stochastic(pool, scores()?, b, StochasticVariant::Power, beta, seed)?,
        Policy::SoftrankBald => acquire_stochastic(pool, scores()?, b, StochasticVariant::SoftRank, beta, seed)?,
        Policy::Balpm | Policy::BalpmNoUncertainty => {
            let state = state.ok_or(AcquisitionError::MissingEntropyState(policy))?;
            if policy == Policy::Balpm {
                acquire_balpm(pool, scores()?, state, beta, b, BalpmTerms::Both)?
            } else {
                acquire_balpm(pool, &[], state, beta, b, BalpmTerms::EntropyOnly)?
            }
        }
    };
    Ok(AcquisitionBatch { policy, round, selections })
}
