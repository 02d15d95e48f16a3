//! Dataset preparation, synthetic sprite clips and two-stage training.

pub mod config;
pub mod data;
pub mod synth;
pub mod train;

pub use config::TrainConfig;
pub use toonbetween_core::metrics;
