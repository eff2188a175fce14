//! Random multimodel ensembles: sampling architectures, training the models
//! independently, voting, and checkpoints.

mod arch;
mod checkpoint;
mod ensemble;
mod vote;

pub use arch::{
    sample_architecture, ArchitectureSpec, Body, CellKind, ConvBlock, Family, HiddenLayer, InputDescriptor,
    SamplingRanges, Span, POOL,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use ensemble::{
    train_ensemble, write_history_csv, Corpus, Ensemble, EnsembleConfig, EpochRecord, Evaluation, Member, Preprocessor,
    ProgressEvent,
};
pub use vote::{majority_vote_binary, majority_vote_multiclass, VoteMode};

use thiserror::Error;

use crate::data::DataError;
use crate::features::FeatureError;
use crate::nn::NnError;
use crate::optim::OptimError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum RmdlError {
    #[error("invalid sampling ranges: {0}")]
    Ranges(String),
    #[error("invalid ensemble config: {0}")]
    Config(String),
    #[error("no votes to combine")]
    EmptyVotes,
    #[error("binary vote value {0} is not 0 or 1")]
    VoteValue(usize),
    #[error("probability rows have width {found}, expected {expected}")]
    VoteWidth { expected: usize, found: usize },
    #[error("incompatible input: {0}")]
    Incompatible(String),
    #[error("all {models} models failed during training")]
    AllFailed { models: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = RmdlError> = std::result::Result<T, E>;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic 64-bit mix of a seed with a stream tag, e.g. a model index.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}
