//! Command implementations behind the `refsr` binary.

pub mod commands;
pub mod config;
