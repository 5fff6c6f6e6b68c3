//! File formats, measurement backends and subcommands for the `joulemodel`
//! command-line tool.

pub mod backends;
pub mod commands;
pub mod config;
pub mod io;
