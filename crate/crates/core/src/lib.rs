//! Core building blocks for sketch-guided cartoon inbetweening: a small
//! reverse-mode tensor engine, image/flow value types, differentiable warping,
//! quality metrics and synthetic sketch generation.

pub mod autograd;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod real;
pub mod sketchgen;

pub use autograd::{ConvOpts, Gradients, Var};
pub use error::{Error, Result};
pub use grid::{BlendMask, ContourMap, DistanceMap, Frame, FlowField, Grid, OcclusionMask, PointGrid, Sketch};
pub use real::Real;
