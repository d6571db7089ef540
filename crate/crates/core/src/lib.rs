//! Desk-scale single-stage object detector: re-parameterizable blocks, a
//! bi-directional concatenation neck, anchor-aided training, self-distillation
//! and the deployment path down to NMS and AP evaluation.

pub mod blocks;
pub mod deploy;
pub mod error;
pub mod evalcli;
pub mod network;
pub mod objective;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
