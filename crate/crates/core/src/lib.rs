//! Multi-scale similarity learning for partially relevant video retrieval.
//!
//! A text query is matched against an untrimmed video through two views of
//! the video: a bag of multi-scale clips built by sliding windows over a
//! downsampled, transformer-encoded unit sequence, and a bag of encoded
//! frames. The clip view detects a key clip by max-pooled cosine similarity;
//! the key clip then guides attention over the frames. Both similarities are
//! trained jointly with triplet ranking and InfoNCE losses and fused at
//! inference.
//!
//! Every tensor here stores one vector per row: a video with `n_v` frames of
//! dimension `d_v` is an `n_v x d_v` array.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod similarity;
pub mod text;
pub mod train;
pub mod video;

pub use error::{Error, ErrorKind, Result};
pub use nn::Real;
