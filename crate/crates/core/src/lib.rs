//! Patch-based memory-augmented reconstruction model for univariate
//! time-series anomaly detection.
//!
//! This crate is `no_std` + `alloc`. File formats, timing, and the command
//! line live in the `pmad` crate.

#![no_std]
// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod detect;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod network;
pub mod training;
pub mod numerics;
pub mod synth;

pub use error::{Error, Result};
