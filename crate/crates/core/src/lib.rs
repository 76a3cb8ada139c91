pub mod base_kernels;
pub mod cascade;
pub mod cli;
mod codec;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod kernel_net;
pub mod matrix;
pub mod metrics;
pub mod svm;

pub use error::{Error, Result};
