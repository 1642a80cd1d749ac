//! Inverse rendering for multi-view photometric stereo captured on a
//! dual-rotation platform (camera-object rig + turntable) under a fixed
//! distant environment light.
//!
//! The library covers the full pipeline: capture geometry, spherical-harmonics
//! environment light, micro-facet shading, SDF volume rendering, photometric
//! feature priors, the training loop, mesh extraction and metrics, synthetic
//! dataset generation, and the command-line driver.

pub mod autodiff;
pub mod brdf;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod envlight;
pub mod error;
pub mod features;
pub mod field;
pub mod imgio;
pub mod mesh;
pub mod metrics;
pub mod neural;
pub mod nets;
pub mod quad;
pub mod renderer;
pub mod rig;
pub mod scene;
pub mod sdf;
pub mod sh;
pub mod train;

pub use error::{Error, Result};
