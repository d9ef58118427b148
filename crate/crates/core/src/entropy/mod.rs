//! Task-agnostic entropy of the acquired prompt distribution.
//!
//! Every distinct prompt `x` in the joint pool ∪ train set gets a fixed
//! diameter `D(x)` (twice its k-th neighbor distance, computed once) and a
//! mutable count `n(x)` of acquired prompts inside the ball of radius
//! `D(x)/2`. The per-prompt acquisition score is
//!
//! ```text
//! e(x) = ln D(x) − ψ(n(x) + 1) / d_X
//! ```
//!
//! which ranks candidates the same way as the joint-space kNN estimate of the
//! acquired set's entropy after adding `x`.

mod cache;
mod digamma;
mod estimators;
mod knn;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{decode_knn_cache, encode_knn_cache, KNN_CACHE_MAGIC};
pub use digamma::{digamma, try_digamma, DomainError};
pub use estimators::{kl_entropy, ksg_entropy, ksg_entropy_with_profile, ln_unit_diameter_ball_volume};
pub use knn::{distance, influence_lists, knn_distance_profile, knn_distance_profile_weighted, KnnProfile};

use crate::feature_store::id_hash;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("need more than k = {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown prompt {0:?}")]
    UnknownPrompt(String),
    #[error("bad kNN cache: {0}")]
    Cache(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Entropy-term hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    pub k: usize,
    /// Effective dimension; a hyperparameter, not the feature dimension.
    pub d_x: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { k: 13, d_x: 1.0 }
    }
}

/// `ln D − ψ(n + 1) / d_X`; −∞ when `D = 0` (exact duplicates in the joint
/// space), so such prompts never win on entropy grounds.
pub fn entropy_term(diameter: f64, n: u32, d_x: f64) -> f64 {
    if diameter <= 0.0 {
        return f64::NEG_INFINITY;
    }
    diameter.ln() - digamma(n as f64 + 1.0) / d_x
}

/// Fixed diameters plus mutable counts over the distinct prompts of the
/// joint set.
#[derive(Debug, Clone)]
pub struct EntropyState {
    config: EntropyConfig,
    prompt_ids: Vec<String>,
    index: HashMap<String, usize>,
    points: Vec<Vec<f32>>,
    diameters: Vec<f64>,
    influence: Vec<Vec<u32>>,
    counts: Vec<u32>,
}

impl EntropyState {
    /// Compute the kNN profile over `prompts` (distinct prompt ids with their
    /// vectors) and start with all counts at zero.
    pub fn build(prompts: Vec<(String, Vec<f32>)>, config: EntropyConfig) -> Result<Self, EntropyError> {
        let ones = vec![1; prompts.len()];
        Self::build_weighted(prompts, &ones, config)
    }

    /// Like [`build`](Self::build), but prompt `i` occurs `weights[i]` times
    /// in the joint set (once per tuple that carries it).
    pub fn build_weighted(
        prompts: Vec<(String, Vec<f32>)>,
        weights: &[u32],
        config: EntropyConfig,
    ) -> Result<Self, EntropyError> {
        Self::validate(&config)?;
        let points: Vec<Vec<f32>> = prompts.iter().map(|(_, v)| v.clone()).collect();
        let profile = knn_distance_profile_weighted(&points, weights, config.k)?;
        Self::with_profile(prompts, profile, config)
    }

    /// Reuse a precomputed profile (e.g. from the cache file).
    pub fn with_profile(
        prompts: Vec<(String, Vec<f32>)>,
        profile: KnnProfile,
        config: EntropyConfig,
    ) -> Result<Self, EntropyError> {
        Self::validate(&config)?;
        if profile.len() != prompts.len() || profile.k() != config.k {
            return Err(EntropyError::InvalidParameter(format!(
                "profile has {} points at k={}, expected {} at k={}",
                profile.len(),
                profile.k(),
                prompts.len(),
                config.k
            )));
        }
        let (prompt_ids, points): (Vec<String>, Vec<Vec<f32>>) = prompts.into_iter().unzip();
        let mut index = HashMap::with_capacity(prompt_ids.len());
        for (i, id) in prompt_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(EntropyError::InvalidParameter(format!("prompt {id:?} listed twice")));
            }
        }
        let zeros = profile.diameters().iter().filter(|&&d| d == 0.0).count();
        if zeros > 0 {
            tracing::warn!(zeros, "prompts with an exact duplicate in the joint space have D = 0");
        }
        let influence = influence_lists(&points, &profile);
        let n = points.len();
        Ok(Self {
            config,
            prompt_ids,
            index,
            points,
            diameters: profile.diameters().to_vec(),
            influence,
            counts: vec![0; n],
        })
    }

    fn validate(config: &EntropyConfig) -> Result<(), EntropyError> {
        if config.k == 0 {
            return Err(EntropyError::InvalidParameter("k must be >= 1".into()));
        }
        if !(config.d_x > 0.0 && config.d_x.is_finite()) {
            return Err(EntropyError::InvalidParameter("d_x must be > 0".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &EntropyConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn prompt_index(&self, prompt_id: &str) -> Option<usize> {
        self.index.get(prompt_id).copied()
    }

    pub fn prompt_id(&self, i: usize) -> &str {
        &self.prompt_ids[i]
    }

    pub fn diameter(&self, i: usize) -> f64 {
        self.diameters[i]
    }

    pub fn diameters(&self) -> &[f64] {
        &self.diameters
    }

    pub fn count(&self, i: usize) -> u32 {
        self.counts[i]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn profile(&self) -> KnnProfile {
        KnnProfile::from_diameters(self.config.k, self.diameters.clone())
    }

    /// Score of prompt `i` under the current counts.
    pub fn entropy_term(&self, i: usize) -> f64 {
        entropy_term(self.diameters[i], self.counts[i], self.config.d_x)
    }

    /// Reset counts to the number of acquired prompt vectors within each
    /// prompt's ball. Each vector counts once per occurrence.
    pub fn init_counts<'a, I>(&mut self, acquired: I)
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        self.counts.iter_mut().for_each(|c| *c = 0);
        for u in acquired {
            self.increment_counts(u);
        }
    }

    /// Same as [`init_counts`](Self::init_counts) for prompts of the joint
    /// set, using the precomputed ball memberships.
    pub fn init_counts_by_id<S: AsRef<str>>(&mut self, acquired: &[S]) -> Result<(), EntropyError> {
        let idx = acquired
            .iter()
            .map(|id| {
                self.prompt_index(id.as_ref())
                    .ok_or_else(|| EntropyError::UnknownPrompt(id.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.counts.iter_mut().for_each(|c| *c = 0);
        for i in idx {
            self.increment_index(i);
        }
        Ok(())
    }

    /// After acquiring a prompt with vector `selected`, increment `n(x)` for
    /// every `x` with `‖x − selected‖ ≤ D(x)/2`.
    pub fn increment_counts(&mut self, selected: &[f32]) {
        for i in 0..self.points.len() {
            if distance(&self.points[i], selected) <= self.diameters[i] / 2.0 {
                self.counts[i] += 1;
            }
        }
    }

    /// Prompts whose counts move when prompt `i` is acquired.
    pub fn influence(&self, i: usize) -> &[u32] {
        &self.influence[i]
    }

    /// [`increment_counts`](Self::increment_counts) for joint-set prompt `i`.
    pub fn increment_index(&mut self, i: usize) {
        for &x in &self.influence[i] {
            self.counts[x as usize] += 1;
        }
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i]
    }

    /// Diameters keyed by prompt hash, for the cache file.
    pub fn keyed_diameters(&self) -> Vec<(u64, f64)> {
        self.prompt_ids
            .iter()
            .zip(&self.diameters)
            .map(|(id, &d)| (id_hash(id), d))
            .collect()
    }

    pub fn save_cache(&self, path: &std::path::Path) -> Result<(), EntropyError> {
        std::fs::write(path, encode_knn_cache(self.config.k, &self.keyed_diameters()))?;
        Ok(())
    }

    /// Build from a cache file written for the same joint prompt set. Fails if
    /// `k` differs or any prompt is missing from the cache.
    pub fn load_cached(
        prompts: Vec<(String, Vec<f32>)>,
        config: EntropyConfig,
        path: &std::path::Path,
    ) -> Result<Self, EntropyError> {
        let (k, entries) = decode_knn_cache(&std::fs::read(path)?)?;
        if k != config.k {
            return Err(EntropyError::Cache(format!("cache has k={k}, config has k={}", config.k)));
        }
        let by_hash: HashMap<u64, f64> = entries.into_iter().collect();
        let diameters = prompts
            .iter()
            .map(|(id, _)| {
                by_hash
                    .get(&id_hash(id))
                    .copied()
                    .ok_or_else(|| EntropyError::Cache(format!("prompt {id:?} missing from cache")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::with_profile(prompts, KnnProfile::from_diameters(k, diameters), config)
    }
}
