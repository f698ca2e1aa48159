//! Proxy-based deep metric learning with class-pair margins taken from a
//! second modality.
//!
//! An [`head::EmbeddingHead`] maps precomputed backbone features to unit
//! embeddings, which are scored against one learned proxy per class by a
//! normalized-softmax family of losses ([`loss`]). The adaptive variant
//! widens the margin against a negative class in proportion to how far apart
//! the two classes are in another modality, e.g. text ([`margins`]).
//! [`trainer`] runs class-balanced SGD, and [`eval`] measures Recall@K over
//! float or sign-binarized embeddings.

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod loss;
pub mod margins;
pub mod sampler;
pub mod selftest;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
