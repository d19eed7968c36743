//! Voxel-based multi-view multi-person 3D pose estimation and tracking.
//!
//! Per-view 2D joint heatmaps are fused into a discretized capture volume,
//! sparsified and smoothed, decoded into per-person skeletons with a
//! root-joint NMS and a soft-argmax over fixed-size crops, and linked over
//! time with occlusion-aware Re-ID fusion and Hungarian assignment. A
//! synthetic scene simulator stands in for the CNN front-end and the
//! [`metrics`] module scores the output.

pub mod assignment;
pub mod bench;
pub mod config;
pub mod error;
pub mod geometry;
pub mod heatmap2d;
pub mod io;
pub mod metrics;
pub mod occlusion;
pub mod pipeline;
pub mod pose3d;
pub mod render;
pub mod simulator;
pub mod skeleton;
pub mod tracker;
pub mod volume;

mod par;

pub use error::{Error, Result};
pub use geometry::{CameraParams, Pose3D, Projection, VoxelGrid};
pub use skeleton::{Joint, NUM_JOINTS, PELVIS};
