//! Orthogonal center learning for deep metric learning.
//!
//! Class centers live in the columns of the softmax weight matrix and are
//! trained with an intra-class pull (optionally restricted to a random unit
//! subspace) plus an orthogonality penalty on the centers present in each
//! batch. Embeddings come from a dual-pooling head whose average and max
//! branches carry their own triplet supervision.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod masking;
pub mod model;
pub mod optim;
pub mod pooling;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
