//! Training-to-netlist toolchain for LUT-based neural network inference
//! operators: high-precision training, magnitude pruning, logic expansion
//! of surviving connections into trainable k-input LUT nodes, retraining,
//! and hardening into a Verilog LUT-array netlist with an area estimate,
//! verified by a bit-exact simulator.

// Index loops over multiple parallel arrays read better than iterator
// chains in the numeric kernels here.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod error;
pub mod grad;
pub mod gradcheck;
pub mod lut;
pub mod netlist;
pub mod pipeline;


pub mod prune;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
