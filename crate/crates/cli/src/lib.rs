//! Command suite around `peel-core`: model generation, inference with taps,
//! block, stem and full-network inversion, the enumeration oracle, and
//! image metrics. Every command writes a provenance manifest next to its
//! outputs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod error;
pub mod image_io;
pub mod manifest;
pub mod table;

pub use args::Cli;
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;
