//! Configuration, stage drivers, metrics, scaling sweep and plotting.

pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod plots;
pub mod scaling;

pub use config::{RunConfig, Stage};
