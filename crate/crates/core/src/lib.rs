//! Energy-guided diffusion for grid reasoning tasks.
//!
//! Training shapes a conditional energy model whose input-gradient drives
//! reverse diffusion; inference scales test-time compute through best-of-N,
//! tree-search denoising, and a hybrid of the two, with the learned energy
//! acting as the intrinsic verifier.

pub mod checkpoint;
pub mod config;
pub mod metrics;
mod error;
pub mod entropy;
pub mod infer;
pub mod linfit;
pub mod losses;
pub mod model;
pub mod negatives;
pub mod rng;
pub mod schedule;
pub mod search;
pub mod tasks;
pub mod train;

pub use error::CoreError;
