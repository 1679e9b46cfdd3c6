//! Pipeline orchestration, reports and benchmark configurations for the
//! `abet` command-line tool.

pub mod benchmarks;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod svg;
