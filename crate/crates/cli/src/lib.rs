//! Reproducible experiment pipelines over the simulation and model crates.
//! Every command is a pure function of its configuration and seed.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

use std::path::Path;

use serde::Serialize;

pub use error::{CliError, CliResult};

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("encoding {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}
