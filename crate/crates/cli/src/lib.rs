//! Pipeline orchestration and report emission for the `colony` command.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod workspace;
