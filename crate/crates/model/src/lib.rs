//! Networks of the inbetweening model and their composition.

pub mod checkpoint;
pub mod config;
pub mod correspondence;
pub mod interpolate;
pub mod occlusion_blend;
pub mod pipeline;
pub mod temporal;
pub mod unet;

pub use config::ModelConfig;
pub use correspondence::CorrespondenceResult;
pub use pipeline::{Inbetweener, Model, Synthesis};
