//! Post-training quantization versus quantization-aware fine-tuning on a toy
//! transformer language model.

// `!(x > 0.0)` is used on purpose so NaN takes the rejecting branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fd;
pub mod gptq;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod landscape;
pub mod lm;
pub mod par;
pub mod qaft;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
