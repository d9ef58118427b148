use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::Scratch;
use super::{AdapterNet, Ensemble, ModelError, Result};
use crate::feature_store::{FeatureDataset, PreferenceTuple};
use crate::seeding;

/// Optimizer and stopping settings. Defaults follow the reference
/// hyperparameters (AdamW, lr 3e-5, cosine schedule, batch 32, patience 3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled (AdamW) weight decay.
    pub weight_decay: f64,
    pub cosine_schedule: bool,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            cosine_schedule: true,
            batch_size: 32,
            patience: 3,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemberHistory {
    /// Running mean train log-likelihood over each epoch's minibatches.
    pub train_ll: Vec<f64>,
    pub val_ll: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl MemberHistory {
    pub fn epochs_run(&self) -> usize {
        self.train_ll.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub members: Vec<MemberHistory>,
}

/// Train every member independently by minimizing the mean negative
/// Bradley-Terry log-likelihood, with per-member early stopping on the
/// validation log-likelihood. Member `i` uses a seed derived from
/// `(cfg.seed, i)` for its data order, so results do not depend on the order
/// or parallelism in which members are trained.
pub fn train(
    ens: &Ensemble,
    train_set: &FeatureDataset,
    val_set: Option<&FeatureDataset>,
    cfg: &TrainConfig,
) -> Result<(Ensemble, TrainHistory)> {
    cfg.validate()?;
    let train_refs = labeled_refs(train_set, ens.input_dim())?;
    if train_refs.is_empty() {
        return Err(ModelError::EmptyTrainSet);
    }
    let val_refs = match val_set {
        Some(v) => labeled_refs(v, ens.input_dim())?,
        None => Vec::new(),
    };
    let results: Vec<Result<(AdapterNet, MemberHistory)>> = ens
        .members()
        .par_iter()
        .enumerate()
        .map(|(i, m)| train_member(i, m, &train_refs, &val_refs, cfg))
        .collect();
    let mut members = Vec::with_capacity(results.len());
    let mut history = TrainHistory::default();
    for r in results {
        let (m, h) = r?;
        members.push(m);
        history.members.push(h);
    }
    Ok((Ensemble::from_members(members)?, history))
}

fn labeled_refs(ds: &FeatureDataset, input_dim: usize) -> Result<Vec<(&PreferenceTuple, bool)>> {
    if ds.d_c() != input_dim {
        return Err(ModelError::DimensionMismatch {
            expected: input_dim,
            found: ds.d_c(),
        });
    }
    ds.tuples()
        .iter()
        .map(|t| {
            t.label
                .map(|l| (t, l))
                .ok_or_else(|| ModelError::Unlabeled(t.tuple_id.clone()))
        })
        .collect()
}

/// Mean log-likelihood of one member on labeled tuples.
pub(crate) fn member_ll(net: &AdapterNet, data: &[(&PreferenceTuple, bool)]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|(t, y)| {
            let margin = net.reward(&t.pair1_vec) - net.reward(&t.pair2_vec);
            super::log_sigmoid(if *y { margin } else { -margin })
        })
        .sum();
    total / data.len() as f64
}

fn train_member(
    index: usize,
    init: &AdapterNet,
    train: &[(&PreferenceTuple, bool)],
    val: &[(&PreferenceTuple, bool)],
    cfg: &TrainConfig,
) -> Result<(AdapterNet, MemberHistory)> {
    let member_seed = seeding::derive(cfg.seed, "member_train", index as u64);
    let mut net = init.clone();
    let n_params = net.params().len();
    let mut adam_m = vec![0.0; n_params];
    let mut adam_v = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut scratch = Scratch::new(net.shape());
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.max_epochs) as f64;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = MemberHistory::default();
    let mut best: Option<(f64, AdapterNet)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = seeding::rng(member_seed, "epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (t, y) = train[i];
                batch_loss += net.accumulate(t, y, &mut scratch, &mut grad);
            }
            let lr = if cfg.cosine_schedule {
                0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
            } else {
                cfg.learning_rate
            };
            if !batch_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { member: index, epoch, lr });
            }
            epoch_loss += batch_loss;
            step += 1;
            let scale = 1.0 / chunk.len() as f64;
            let bc1 = 1.0 - cfg.beta1.powi(step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(step as i32);
            for (((p, g), m), v) in net
                .params_mut()
                .iter_mut()
                .zip(&grad)
                .zip(adam_m.iter_mut())
                .zip(adam_v.iter_mut())
            {
                let g = g * scale;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p *= 1.0 - lr * cfg.weight_decay;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
            }
        }
        history.train_ll.push(-epoch_loss / train.len() as f64);

        if val.is_empty() {
            history.best_epoch = epoch;
            continue;
        }
        let val_ll = member_ll(&net, val);
        if !val_ll.is_finite() {
            return Err(ModelError::NonFiniteLoss { member: index, epoch, lr: cfg.learning_rate });
        }
        history.val_ll.push(val_ll);
        match &best {
            Some((b, _)) if val_ll <= *b => {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((val_ll, net.clone()));
                history.best_epoch = epoch;
                stale = 0;
            }
        }
    }
    let net = match best {
        Some((_, b)) => b,
        None => net,
    };
    Ok((net, history))
}
