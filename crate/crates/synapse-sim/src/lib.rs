//! File formats, run configuration and experiment drivers wrapped around
//! the core pipeline model.

pub mod config;
pub mod experiments;
pub mod formats;
pub mod report;
pub mod scenario;
