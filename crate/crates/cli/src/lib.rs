//! Library side of the `vibre` command: configuration and the four
//! subcommands.

pub mod commands;
pub mod config;

pub use commands::{analyze, eval, gen_data, load_data, sha256_hex, train, Manifest};
pub use config::{Overrides, RunConfig};
