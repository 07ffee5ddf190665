//! Desk-scale pipeline for discrete-token speech modeling: a merged residual
//! vector quantizer, decoder-only codec language models with joint
//! acoustic+phoneme prediction, a monotonic-alignment inference engine, and
//! benchmarking of autoregressive step counts and robustness.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32` and `f64`); artifacts on disk are always f32, while
//! verification code (finite-difference gradient checks, quantizer oracles)
//! instantiates f64.

pub mod bench;
pub mod codec;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod format;
pub mod lm;
pub mod plot;
pub mod scalar;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used for production artifacts.
pub type DefaultScalar = f32;

/// Latent frame sequence at the artifact scalar type.
pub type Latent = codec::LatentSeq<DefaultScalar>;
/// Codebook set at the artifact scalar type.
pub type Codebooks = codec::CodebookSet<DefaultScalar>;
/// Synthesizer at the artifact scalar type.
pub type Synth = corpus::Synthesizer<DefaultScalar>;
/// Utterance at the artifact scalar type.
pub type Utterance = corpus::SyntheticUtterance<DefaultScalar>;
/// Language-model weights at the artifact scalar type.
pub type Weights = lm::LmWeights<DefaultScalar>;
