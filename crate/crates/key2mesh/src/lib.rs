//! Desk-scale pipeline for lifting 2D keypoints to an articulated body mesh.
//!
//! The crate is organized bottom-up: [`diff`] provides the reverse-mode
//! autodiff graph every training path runs on, [`body`] the blend-skinned
//! body model, [`camera`] the fixed pinhole camera, [`datagen`] synthetic
//! keypoint/parameter pair synthesis, [`network`] the MLP regressor and
//! critic, [`pretrain`] and [`adapt`] the two training phases, [`metrics`]
//! the Procrustes-aligned error metrics, and [`dataio`] file formats for
//! detections, mocap, and feature dumps.

pub mod adapt;
pub mod body;
pub mod camera;
pub mod chkpt;
pub mod config;
pub mod dataio;
pub mod datagen;
pub mod diff;
pub mod metrics;
pub mod network;
pub mod pretrain;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
