//! Command-line entry points and the HTTP chat API.

pub mod commands;
pub mod config;
pub mod server;
