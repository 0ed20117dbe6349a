//! Underwater active-stereo reconstruction.
//!
//! The pipeline rectifies a stereo pair with depth-dependent refraction
//! compensation, segments the target region, builds a cost volume from a
//! multi-scale patch CNN, aggregates it with semi-global matching, checks
//! left-right consistency and triangulates a point cloud. Bubble degradation
//! is simulated for transfer training, and a pair of CNNs restores surface
//! texture under the projected pattern.

pub mod bubble;
pub mod config;
pub mod costvol;
pub mod dataset;
pub mod disparity;
mod error;
pub mod frame;
pub mod image;
pub mod matcher;
pub mod pipeline;
pub mod recon3d;
pub mod rectify;
pub mod report;
pub mod segment;
pub mod sgm;
pub mod synth;
pub mod texture;

pub use error::{Error, Result};
