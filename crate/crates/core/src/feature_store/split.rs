use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{FeatureDataset, FeatureStoreError, Result};
use crate::seeding;

/// Which tuples are still in the pool and which have been acquired.
///
/// `train_ids` keeps acquisition order; `pool_ids` keeps dataset order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitState {
    pub pool_ids: Vec<String>,
    pub train_ids: Vec<String>,
    #[serde(default)]
    pub val_ids: Vec<String>,
}

impl SplitState {
    /// Move acquired ids from the pool to the end of the training set.
    /// Unknown or already-acquired ids are an error and leave the state
    /// untouched.
    pub fn acquire<S: AsRef<str>>(&mut self, ids: &[S]) -> Result<()> {
        let wanted: HashSet<&str> = ids.iter().map(|s| s.as_ref()).collect();
        let in_pool: HashSet<&str> = self.pool_ids.iter().map(String::as_str).collect();
        if let Some(missing) = ids.iter().find(|id| !in_pool.contains(id.as_ref())) {
            return Err(FeatureStoreError::UnknownTuple(missing.as_ref().to_string()));
        }
        if wanted.len() != ids.len() {
            return Err(FeatureStoreError::DuplicateTupleId(
                "batch contains a repeated id".into(),
            ));
        }
        self.pool_ids.retain(|id| !wanted.contains(id.as_str()));
        self.train_ids
            .extend(ids.iter().map(|s| s.as_ref().to_string()));
        Ok(())
    }
}

/// Sample `init_train_size` tuples uniformly without replacement as the
/// initial training set. Deterministic in `(dataset order, seed)`.
pub fn initial_split(
    dataset: &FeatureDataset,
    init_train_size: usize,
    seed: u64,
) -> Result<SplitState> {
    if init_train_size > dataset.len() {
        return Err(FeatureStoreError::SplitTooLarge {
            requested: init_train_size,
            available: dataset.len(),
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = seeding::rng(seed, "initial_split", 0);
    order.shuffle(&mut rng);
    let mut chosen = order[..init_train_size].to_vec();
    let picked: HashSet<usize> = chosen.iter().copied().collect();
    chosen.sort_unstable();
    let tuples = dataset.tuples();
    Ok(SplitState {
        train_ids: chosen.iter().map(|&i| tuples[i].tuple_id.clone()).collect(),
        pool_ids: (0..tuples.len())
            .filter(|i| !picked.contains(i))
            .map(|i| tuples[i].tuple_id.clone())
            .collect(),
        val_ids: Vec::new(),
    })
}
