//! Multi-view stereo depth estimation with global-context and cross-view
//! transformers, cascade cost volumes, and depth-map fusion.

pub mod camera;
pub mod config;
pub mod cost;
mod error;
pub mod features;
pub mod fusion;
pub mod hypotheses;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod regularize;
pub mod synth;
pub mod train;
pub mod transformer;
pub mod verify;
pub mod warp;

pub use error::{Error, Result};
