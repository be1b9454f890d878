//! Feature selection as gradient search in a learned, continuous space of
//! feature subsets.
//!
//! The pipeline has four stages:
//!
//! 1. [`records`] collects `(subset, accuracy)` pairs from classic filter
//!    selectors and a multi-agent reinforcement explorer, then augments them
//!    with token permutations.
//! 2. [`model`] jointly trains an LSTM encoder, an attention LSTM decoder and
//!    a feed-forward evaluator over feature-ID token sequences, built on the
//!    small reverse-mode autodiff core in [`tensor`].
//! 3. [`search`] moves the embeddings of the best historical subsets along
//!    the evaluator's gradient.
//! 4. The decoder turns the improved embeddings back into subsets, which are
//!    validated with the random forest in [`downstream`].
//!
//! Neural code is generic over the floating point type (see [`Scalar`]);
//! the aliases below fix it to `f64`, which is what the pipeline uses.

pub mod downstream;
pub mod error;
pub mod model;
pub mod records;
pub mod scalar;
pub mod search;
pub mod synth;
pub mod tabular;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// 64-bit computation graph.
pub type Graph64 = tensor::Graph<f64>;
/// 64-bit parameter store.
pub type ParamStore64 = tensor::ParamStore<f64>;
/// 64-bit Adam optimizer.
pub type Adam64 = tensor::Adam<f64>;
/// 64-bit encoder-evaluator-decoder model.
pub type Model64 = model::SubsetModel<f64>;
/// 64-bit embedding matrix.
pub type Embedding64 = model::EmbeddingMatrix<f64>;
/// 32-bit encoder-evaluator-decoder model.
pub type Model32 = model::SubsetModel<f32>;
