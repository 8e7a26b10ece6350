//! Allocation-only core of the flip-guarded preference alignment lab.
//!
//! Everything in here is a pure function of its inputs and seeds: the
//! reverse-mode autodiff engine, the tiny causal language model, the
//! synthetic preference world, the alignment losses and optimizer, the
//! focal negative-flip constraint, and the regression metrics. File formats,
//! the CLI and run orchestration live in the `flipguard` companion crate.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod alignment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod flipguard;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
