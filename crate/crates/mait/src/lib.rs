//! Masked-attention transformer laboratory.
//!
//! Local R x R attention masks applied before softmax, interchangeable
//! attention kernels (standard, dense masked, sparse masked), a toy
//! transformer built on a small reverse-mode tensor tape, locality metrics,
//! an analytical attention-map cost model, and an ALS-guided mask-placement
//! search.

pub mod attention;
pub mod error;
pub mod harness;
pub mod maskgen;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod search;
pub mod train;

pub use error::{Error, Result};
