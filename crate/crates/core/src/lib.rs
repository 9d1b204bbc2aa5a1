//! Core library: autodiff engine, networks, diffusion process, test-time
//! adaptation, and the synthetic benchmark.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
pub use tensor::{DType, Graph, Scalar, Tensor, Var};
