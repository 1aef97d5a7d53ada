//! Training, sampling and evaluation for a multi-stream token language model
//! with text cross-attention, classifier-free-guidance text dropout, and a
//! batch-level representation-regularization loss that matches the pairwise
//! similarity structure of pooled audio states to that of the text.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
