//! Answer-sentence selection by convolutional matching over pairwise token
//! similarity tensors.
//!
//! A question/answer pair is embedded token by token, compared position by
//! position under one or more similarity measurements (a learnable bilinear
//! metric per modality, or fixed euclidean/cosine similarity), and the
//! resulting `k × L1 × L2` tensor is read by a small stack of narrow
//! convolutions. The pooled representation, together with two word-overlap
//! features, feeds a logistic output trained pointwise with cross-entropy.

pub mod checkpoint;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod net;
pub mod ops;
pub mod similarity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use net::{Depth, MatchNet, NetConfig};
pub use ops::Mode;
pub use similarity::Measurement;
pub use tensor::Tensor;
