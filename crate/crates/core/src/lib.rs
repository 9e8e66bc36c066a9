//! Diversified mutual metric learning at desk scale.
//!
//! A cohort of embedding encoders is trained simultaneously on a synthetic
//! shape dataset. Each member optimizes a metric learning loss plus a mutual
//! term that pulls its pairwise-distance matrix toward the matrices of its
//! peers. The cohort is diversified by head initialization, stochastic
//! update frequency and per-member input augmentation.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod mutual;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
