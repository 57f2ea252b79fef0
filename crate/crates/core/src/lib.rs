#![forbid(unsafe_code)]

//! SINet: grouped bottleneck units with exchange shortcuts, dense funnel
//! layers, and an attention-based joint decision head, together with a static
//! parameter/multiply-add analyzer, a small f64 autodiff engine, and a
//! deterministic training loop for desk-scale experiments.
//!
//! The crate is organized around the network's three mechanisms:
//!
//! - [`blocks`]: composite bottleneck `H`, exchange shortcut connection,
//!   dense funnel layer, SI units and blocks.
//! - [`decision`]: attention-weighted joint decision over all block outputs,
//!   plus the plain single-head baseline.
//! - [`analyzer`]: static cost accounting tied to the executed multiply count
//!   of the tensor kernels.
//!
//! Everything runs on [`tape::Tape`], a reverse-mode autodiff tape over dense
//! f64 tensors. The `parallel` feature (default) runs the conv/matmul kernels
//! on rayon; results are bit-identical with the feature disabled.

pub mod analyzer;
pub mod arch;
pub mod blocks;
pub mod decision;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
