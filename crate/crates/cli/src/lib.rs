//! Configuration-driven experiment runner for `partial-gdro`.
//!
//! See [`config`] for the file format, [`runner`] for the per-seed jobs and
//! [`report`] for seed aggregation.

pub mod config;
mod error;
pub mod report;
pub mod runner;

pub use error::CliError;
