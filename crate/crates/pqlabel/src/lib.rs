//! File formats, experiment harness and CLI around `pqlabel-core`.

pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod harness;
pub mod report;

pub use error::{Error, Result};
