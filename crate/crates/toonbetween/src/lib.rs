//! Command-line interface and HTTP service for sketch-guided inbetweening.

pub mod cli;
pub mod service;
