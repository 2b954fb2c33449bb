//! Sample convolution and interaction networks (SCINet) for multi-step
//! time series forecasting, built on a small reverse-mode autodiff engine.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod scinet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scinet::{ModelConfig, Scinet};
pub use tensor::{Tape, Tensor, Var};
