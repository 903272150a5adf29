//! N:M semi-structured sparsity-aware training on desk-scale models.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod error;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod scaling;
pub mod scalinglaw;
pub mod sparsity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
