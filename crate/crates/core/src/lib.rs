//! Out-of-distribution detection with uni-dimensional class embeddings.
//!
//! An encoder is pre-trained with a spectral contrastive loss, fine-tuned
//! against a frozen orthonormal cosine head, and then each class is summarized
//! by the first singular vector of its features. Test samples are scored by
//! their smallest angle to any class direction.

// `!(x > y)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod contrastive;
pub mod corruptions;
pub mod data;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod theory;

pub use error::{Result, RoddError};
pub use linalg::{Matrix, SvdResult};
