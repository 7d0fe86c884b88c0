//! Command-line pipeline around the `isto` crate: each command reads and
//! writes plain CSV/JSON files in an output directory.

pub mod commands;
pub mod config;
pub mod plot;

pub use config::RunConfig;
