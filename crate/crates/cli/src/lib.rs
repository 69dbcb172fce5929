//! Command-line front end and HTTP session service.

pub mod api;
pub mod commands;

pub use commands::{run, Cli, Command};
