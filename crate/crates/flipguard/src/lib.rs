//! File formats, run orchestration and the `flipguard` command line around
//! the allocation-only core.
//!
//! Every pipeline stage writes into `<root>/<command>-<seed>-<fingerprint>`
//! and leaves a [`RunManifest`] beside its outputs that is enough to replay
//! the stage bit-identically.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::{load_config, RunConfig};
pub use error::{Error, Result};
pub use flipguard_core as core;
pub use manifest::RunManifest;
pub use pipeline::{run_training, Pipeline};
pub use report::emit_report;

#[cfg(test)]
mod tests;
