//! Simulation of distributed gradient descent under Top-k and RegTop-k
//! gradient sparsification with error accumulation.

pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod sparsify;
pub mod vector;

pub use error::{Error, Result};
pub use sparsify::{
    posterior_distortion, regtopk_score, regtopk_step, top_k_select, topk_step, Distortion,
    RegTopKParams, WorkerState,
};
pub use vector::{DenseVector, Mask, SparsePayload};
