//! Pipeline orchestration behind the `mdm` command-line tool.

pub mod commands;
pub mod config;
pub mod plot;
