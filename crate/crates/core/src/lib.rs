//! Stochastic backpropagation: exact forward passes, backward passes that keep
//! activation gradients only at a sampled subset of positions, and the
//! activation memory that buys.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod network;
pub mod ops;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
