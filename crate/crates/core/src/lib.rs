//! Adaptive mixed-resolution token allocation: a coarse-to-fine encoder that
//! splits 32×32 patches into finer tokens only where class boundaries are
//! predicted, refines the resulting mixed set with local cluster attention,
//! and accounts the compute each image actually costs.

pub mod boundary;
pub mod clusterattn;
pub mod config;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod model;
pub mod nn;
pub mod rng;
pub mod serialize;
pub mod stage1;
pub mod stage2;
pub mod tensor;

pub use error::{Error, Result};
