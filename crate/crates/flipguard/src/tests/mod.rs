//! In-crate tests for file formats, configuration and the command line.
//! They live here rather than under `tests/` so they run before the long
//! acceptance suite.

mod cli;
mod io;
