//! Hierarchical autoregressive language modeling with multi-resolution
//! latent streams.
//!
//! A bottom-up encoder compresses tokens into progressively coarser chunk
//! states; top-down local decoders with strictly bounded attention
//! reconstruct finer streams. The crate carries the model itself
//! ([`model`]), its training objective ([`train`]), an instrumented
//! generation engine that counts every KV-cache write and read ([`infer`]),
//! and the exact cost model those counters are checked against ([`cost`]).

pub mod blocks;
pub mod cost;
pub mod count;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Epsilon inside every RMS normalization.
pub const RMSNORM_EPS: f64 = 1e-6;

/// Rotary position encoding base.
pub const ROPE_THETA: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} does not match buffer length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("cannot reshape {from:?} to {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("attention row {row} has an empty context")]
    EmptyAttentionRow { row: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("slice [{start}, {start}+{len}) exceeds extent {extent}")]
    SliceRange {
        start: usize,
        len: usize,
        extent: usize,
    },

    #[error("concat of zero tensors")]
    EmptyConcat,

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {len} is not divisible by the chunk product {chunk_product}")]
    ChunkDivisibility { len: usize, chunk_product: usize },

    #[error("chunk index {g} out of range 1..={max}")]
    ChunkIndexOutOfRange { g: usize, max: usize },

    #[error("KV cache capacity {capacity} exceeded (len {len} + {extra} incoming)")]
    CacheCapacity {
        capacity: usize,
        len: usize,
        extra: usize,
    },

    #[error("prompt of {len} tokens exceeds the configured max context {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite logits while sampling")]
    NonFiniteLogits,

    #[error("negative loss weight {0}")]
    NegativeLossWeight(f64),

    #[error("sequence too short: need at least {need} tokens, got {got}")]
    SequenceTooShort { need: usize, got: usize },

    #[error("missing state: {0}")]
    MissingState(&'static str),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Deterministic RNG used throughout: one seed, one stream.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    seeded_rng(seed)
}
