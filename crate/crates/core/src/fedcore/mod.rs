//! Desk-scale federated averaging.
//!
//! Clients start from the global parameters, run a few epochs of mini-batch
//! optimisation on their shard and return the parameter delta. The server
//! adds the mean of the accepted deltas to the global model. Summation is
//! done in `f64` in ascending client order so results are reproducible
//! bit-for-bit.

mod data;
mod model;
mod train;

pub use data::{load_idx, parse_idx, split_iid, synthetic, ClientDataset, IdxArray, SyntheticSpec};
pub use model::{loss_and_grad, predict, Architecture};
pub use train::{
    aggregate, client_train_seed, forward_loss, local_train, plain_fedavg, FederatedSetup,
    GlobalModel, ModelUpdate, Optimizer, TrainConfig,
};

use thiserror::Error;

use crate::codec::CodecError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("cannot split {samples} samples into {shards} shards")]
    TooFewSamples { samples: usize, shards: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite gradient or parameter at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("no verified updates to aggregate")]
    EmptyVerifiedSet,
    #[error("update for round {update} does not match global round {global}")]
    RoundMismatch { global: u32, update: u32 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}
