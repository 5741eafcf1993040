//! File formats, the synthetic trip generator and the `fpd` command line
//! built on [`fpd_core`].

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod generator;
pub mod io;
pub mod pipeline;

pub use error::{exit, CliError, CliResult};
