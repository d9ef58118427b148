//! Pool-based batch active learning for pairwise preference models.
//!
//! The acquisition policy combines two sources of epistemic uncertainty:
//!
//! - a task-dependent one, the BALD mutual information of a deep-ensemble
//!   Bradley-Terry preference model ([`uncertainty`], [`model`]);
//! - a task-agnostic one, the gain in entropy of the acquired prompt
//!   distribution, estimated with a kNN estimator whose neighbor distances are
//!   taken in the joint pool and training prompt space ([`entropy`]).
//!
//! [`acquisition`] builds batches greedily from both terms, [`harness`] runs
//! the outer train/evaluate/acquire loop, [`sim`] provides a synthetic
//! ground-truth environment and [`label_service`] holds the queue used when
//! labels come from humans.

pub mod acquisition;
pub mod entropy;
pub mod feature_store;
pub mod harness;
pub mod label_service;
pub mod model;
pub mod seeding;
pub mod sim;
pub mod uncertainty;

pub use acquisition::{AcquisitionBatch, Policy, PolicyConfig, Selection};
pub use entropy::{EntropyState, KnnProfile};
pub use feature_store::{FeatureDataset, Format, PreferenceTuple, SplitState};
pub use model::{AdapterNet, Ensemble, TrainConfig};
pub use uncertainty::{UncertaintyKind, UncertaintyScores};
