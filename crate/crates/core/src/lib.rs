//! Power-of-two quantized MLP inference on a simulated pipelined accelerator.
//!
//! The crate is organised bottom-up:
//!
//! - [`quant`] builds PoT / SPx codebooks and projects real values onto them.
//! - [`shift_arith`] multiplies fixed-point values by codebook levels using
//!   only shifts, sign flips and additions.
//! - [`pipeline_sim`] models the dual-clock input-buffer / processing-unit
//!   dataflow and reports cycles, stalls and operation counts.
//! - [`mlp`] and [`train`] hold the float model, its SGD trainer, and the
//!   simulated quantized inference path.
//! - [`data`] reads MNIST IDX files.
//! - [`cli`] wires everything into the `potaccel` command.

pub mod cli;
pub mod data;
pub mod error;
pub mod mlp;
pub mod pipeline_sim;
pub mod quant;
pub mod shift_arith;
pub mod train;

pub use error::{Error, Result};
