//! Library surface of the command-line tool: configuration handling, the
//! property-check harness, and the subcommand implementations. The binary in
//! `main.rs` is a thin argument parser over these.

pub mod checks;
pub mod commands;
pub mod config;
