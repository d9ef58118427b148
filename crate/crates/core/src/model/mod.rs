//! Bayesian preference model: an ensemble of small tanh MLP adapters, each
//! mapping a prompt-completion feature vector to a scalar latent reward.
//! Preferences follow the Bradley-Terry model over the two rewards and the
//! posterior predictive is the ensemble mean.

mod checkpoint;
mod net;
mod train;

use thiserror::Error;

use crate::feature_store::{FeatureDataset, PreferenceTuple};
use crate::seeding;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use net::{AdapterNet, Gradient};
pub use train::{train, MemberHistory, TrainConfig, TrainHistory};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has dimension {found}, network expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("evaluation set is empty")]
    EmptyTestSet,
    #[error("tuple {0:?} has no label")]
    Unlabeled(String),
    #[error("non-finite loss in member {member} at epoch {epoch} (lr {lr})")]
    NonFiniteLoss { member: usize, epoch: usize, lr: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Smallest and largest probabilities returned by [`bt_probability`]; keeps
/// the result strictly inside (0, 1) so log-likelihoods stay finite.
const P_MIN: f64 = f64::MIN_POSITIVE;
const P_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Bradley-Terry probability that the completion with reward `r1` is
/// preferred over the one with reward `r2`: `sigmoid(r1 - r2)`.
pub fn bt_probability(r1: f64, r2: f64) -> f64 {
    sigmoid(r1 - r2).clamp(P_MIN, P_MAX)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    // exp of a non-positive argument never overflows
    let e = (-z.abs()).exp();
    if z >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// `ln sigmoid(z)` without forming the probability.
pub(crate) fn log_sigmoid(z: f64) -> f64 {
    -((-z.abs()).exp().ln_1p() + (-z).max(0.0))
}

pub fn member_predict(member: &AdapterNet, t: &PreferenceTuple) -> Result<f64> {
    member.check_input(t.pair1_vec.len())?;
    member.check_input(t.pair2_vec.len())?;
    Ok(bt_probability(
        member.reward(&t.pair1_vec),
        member.reward(&t.pair2_vec),
    ))
}

/// K structurally identical, independently initialized adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<AdapterNet>,
}

impl Ensemble {
    /// Fresh ensemble; member `i` is initialized from a seed derived from
    /// `(seed, i)`.
    pub fn new(k: usize, input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(ModelError::InvalidConfig("ensemble size must be >= 1".into()));
        }
        if input_dim == 0 || hidden.contains(&0) {
            return Err(ModelError::InvalidConfig("layer sizes must be >= 1".into()));
        }
        let members = (0..k)
            .map(|i| {
                let mut rng = seeding::rng(seed, "member_init", i as u64);
                AdapterNet::random(input_dim, hidden, &mut rng)
            })
            .collect();
        Ok(Self { members })
    }

    pub fn from_members(members: Vec<AdapterNet>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| ModelError::InvalidConfig("ensemble needs a member".into()))?;
        if members.iter().any(|m| m.shape() != first.shape()) {
            return Err(ModelError::InvalidConfig(
                "ensemble members must share one architecture".into(),
            ));
        }
        Ok(Self { members })
    }

    /// Same architecture, fresh parameters from `seed`.
    pub fn reinitialize(&self, seed: u64) -> Self {
        let shape = self.members[0].shape();
        let hidden = &shape[1..shape.len() - 1];
        Self::new(self.members.len(), shape[0], hidden, seed).expect("shape already validated")
    }

    pub fn members(&self) -> &[AdapterNet] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    /// Per-member probabilities and their arithmetic mean.
    pub fn predict(&self, t: &PreferenceTuple) -> Result<(Vec<f64>, f64)> {
        let probs = self
            .members
            .iter()
            .map(|m| member_predict(m, t))
            .collect::<Result<Vec<_>>>()?;
        let mean = probs.iter().sum::<f64>() / probs.len() as f64;
        Ok((probs, mean))
    }

    /// Mean latent reward across members.
    pub fn mean_reward(&self, x: &[f32]) -> f64 {
        self.members.iter().map(|m| m.reward(x)).sum::<f64>() / self.members.len() as f64
    }
}

pub fn ensemble_predict(ens: &Ensemble, t: &PreferenceTuple) -> Result<(Vec<f64>, f64)> {
    ens.predict(t)
}

/// Mean log-likelihood (nats) of the labels under the ensemble predictive.
pub fn evaluate_ll(ens: &Ensemble, test: &FeatureDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(ModelError::EmptyTestSet);
    }
    let mut total = 0.0;
    for t in test.tuples() {
        let label = t.label.ok_or_else(|| ModelError::Unlabeled(t.tuple_id.clone()))?;
        let (_, p) = ens.predict(t)?;
        total += if label { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / test.len() as f64)
}
