//! Library surface of the command-line workbench, so integration tests can
//! drive commands in-process.

pub mod commands;
pub mod config;
pub mod plot;
