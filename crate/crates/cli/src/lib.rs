//! Command-line tools, the HTTP job service and bridge transports for the
//! `alforge-core` engine.

pub mod cli;
pub mod http_bridge;
pub mod render;
pub mod report;
pub mod service;
