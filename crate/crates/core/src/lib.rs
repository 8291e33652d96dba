//! Sparse higher-order Laplace approximation for functional integrals over
//! time-discretized Markov processes.

pub mod bench;
pub mod block_linalg;
pub mod error;
pub mod estimation;
pub mod jet;
pub mod laplace_core;
pub mod models;
pub mod oracle;
pub mod sparse_tensors;

pub use error::{Error, Result};
