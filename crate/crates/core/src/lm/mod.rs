//! Toy decoder-only language model with reserved injection slots.

mod model;
mod pretrain;
pub mod vocab;

pub use model::{DecodeMode, InjectionDepth, InjectionMode, InjectionOptions, LmVars, Slot, ToyLm, ToyLmConfig};
pub use pretrain::{
    encode_pair, pretrain_lm, pretrain_on_examples, slot_positions, LmExample, PretrainConfig, PretrainReport,
    SlotInputs,
};
pub use vocab::Vocab;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid LM config: {0}")]
    Config(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("injection at position {0} does not target a reserved slot token")]
    InjectionPosition(usize),
    #[error("reserved slot token at position {0} has no injection")]
    MissingInjection(usize),
    #[error("injection vector has dimension {got}, expected {expected}")]
    InjectionDim { expected: usize, got: usize },
    #[error("the LM is frozen")]
    Frozen,
    #[error("pretraining corpus is empty")]
    EmptyCorpus,
    #[error("pretraining diverged")]
    Diverged,
    #[error("checkpoint digest does not match its parameters")]
    DigestMismatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
