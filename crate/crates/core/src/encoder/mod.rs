//! Linearization, tokenization and the small causal encoder with its
//! next-group and outcome heads, plus reverse-mode gradients and AdamW.

mod gradcheck;
mod io;
mod kernels;
mod model;
mod params;
mod tape;
mod tensor;
mod vocab;

use thiserror::Error;

use crate::domain::DomainError;

pub use gradcheck::{check_gradients, TensorCheck};
pub use io::{
    check_catalog_hash, checksum, decode_weights, encode_weights, read_weights, write_weights, TensorEntry,
    WeightsHeader, FORMAT_VERSION, MAGIC,
};
pub(crate) use kernels::masked_softmax;
pub use model::{EncoderCache, EncoderConfig, EncoderParams, ForwardOutput, Head};
pub(crate) use model::mlp_forward;
pub(crate) use params::normal_tensor;
pub use params::{clip_grad_norm, AdamConfig, AdamState, ParamSet};
pub use tape::{grad, Tape, Var};
pub use tensor::{Float, Tensor};
pub use vocab::{
    linearize_group, linearize_text, parse_linearized, render_value, Prefix, TokenSeq, Vocab,
    COLON, DEFAULT_MAX_LEN, DEFAULT_NUM_BINS, EOS, OUTCOME_NEG, OUTCOME_POS, PAD, PIPE,
    TRIAGE_GROUP,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("catalog hash mismatch: weights built for {expected}, loaded catalog is {found}")]
    CatalogMismatch { expected: String, found: String },
    #[error("parameter shapes: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("weights format: {0}")]
    Format(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
