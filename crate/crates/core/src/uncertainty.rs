//! Task-dependent uncertainty of pool tuples under the ensemble.
//!
//! For member probabilities `p_1..p_K` with mean `p̄`:
//! predictive = H(p̄), aleatoric = mean H(p_k), BALD = predictive − aleatoric.
//! All entropies are in nats.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::PreferenceTuple;
use crate::model::{Ensemble, ModelError};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Which score feeds acquisition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    #[default]
    Epistemic,
    Predictive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScores {
    pub tuple_id: String,
    pub bald: f64,
    pub predictive: f64,
    pub aleatoric: f64,
    pub member_probs: Vec<f64>,
}

impl UncertaintyScores {
    pub fn from_member_probs(tuple_id: impl Into<String>, member_probs: Vec<f64>) -> Self {
        let (predictive, aleatoric) = entropy_parts(&member_probs);
        Self {
            tuple_id: tuple_id.into(),
            bald: (predictive - aleatoric).max(0.0),
            predictive,
            aleatoric,
            member_probs,
        }
    }

    pub fn get(&self, kind: UncertaintyKind) -> f64 {
        match kind {
            UncertaintyKind::Epistemic => self.bald,
            UncertaintyKind::Predictive => self.predictive,
        }
    }
}

fn h(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Binary entropy in nats, with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64, UncertaintyError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(UncertaintyError::OutOfRange(p));
    }
    Ok(h(p))
}

fn entropy_parts(probs: &[f64]) -> (f64, f64) {
    if probs.is_empty() {
        return (0.0, 0.0);
    }
    // exact agreement must give exactly zero disagreement; summing K copies
    // and dividing by K does not round-trip
    if probs.iter().all(|&p| p == probs[0]) {
        let e = h(probs[0]);
        return (e, e);
    }
    let k = probs.len() as f64;
    let mean = probs.iter().sum::<f64>() / k;
    let aleatoric = probs.iter().map(|&p| h(p)).sum::<f64>() / k;
    (h(mean), aleatoric)
}

/// Mutual information between the label and the ensemble member:
/// `H(mean p) − mean H(p)`, clamped at zero against rounding.
pub fn bald_score(member_probs: &[f64]) -> f64 {
    if member_probs.is_empty() {
        return 0.0;
    }
    let (predictive, aleatoric) = entropy_parts(member_probs);
    (predictive - aleatoric).max(0.0)
}

/// Score every tuple once; the result is held fixed for a whole batch.
pub fn score_pool<'a, I>(ens: &Ensemble, pool: I) -> Result<Vec<UncertaintyScores>, UncertaintyError>
where
    I: IntoParallelIterator<Item = &'a PreferenceTuple>,
    I::Iter: IndexedParallelIterator,
{
    pool.into_par_iter()
        .map(|t| {
            let (probs, _) = ens.predict(t)?;
            Ok(UncertaintyScores::from_member_probs(t.tuple_id.clone(), probs))
        })
        .collect()
}

/// CSV with header `tuple_id,bald,predictive,aleatoric`.
pub fn write_scores_csv<W: Write>(scores: &[UncertaintyScores], w: W) -> Result<(), UncertaintyError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["tuple_id", "bald", "predictive", "aleatoric"])?;
    for s in scores {
        wtr.write_record([
            s.tuple_id.clone(),
            s.bald.to_string(),
            s.predictive.to_string(),
            s.aleatoric.to_string(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}
