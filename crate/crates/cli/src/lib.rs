//! Library side of the `pathogan` command: configuration, subcommands and
//! figure panels.

pub mod commands;
pub mod config;
pub mod panel;
