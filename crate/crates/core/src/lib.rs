//! Data-free post-training quantization by residual expansion.
//!
//! A trained network's kernels are expanded into a sum of quantized residual
//! terms ([`quantizer`]), optionally pruned row-wise, regrouped into an
//! ensemble of architecture-identical members ([`ensemble`]), and reported
//! with certified worst-case logit error bounds ([`bounds`]) and bit-operation
//! costs ([`headcount`]). [`container`] and [`pipeline`] tie these together.

// `!(a <= b)` is deliberate: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod container;
pub mod ensemble;
pub mod error;
pub mod headcount;
pub mod linalg;
pub mod network;
pub mod pipeline;
pub mod quantizer;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{Evaluate, Layer, Network};
pub use tensor::Tensor;
