//! Single-object 3D tracking on Lidar point clouds.
//!
//! The pipeline turns a point cloud into a sparse "pillar" pseudo-image,
//! extracts features for a target and a search region with a small shared
//! convolutional net, cross-correlates them, and decodes the score-map peak
//! back into a 3D box. A streaming evaluation harness replays sequences
//! under a latency model and scores both predictive and non-predictive
//! real-time protocols against the usual offline metrics.
//!
//! Modules, bottom-up:
//! - [`geom`]: boxes, pixel regions, grids, angles.
//! - [`pillars`]: voxelization and the pillar feature encoder.
//! - [`nn`]: dense tensors, conv/correlation/bicubic kernels with exact
//!   reverse-mode gradients, the loss, Adam, and the checkpoint container.
//! - [`tracker`]: the Siamese tracker itself (rotation search, penalty
//!   maps, peak decoding, template merging).
//! - [`train`]: pair sampling, label/weight maps, and the training loop.
//! - [`eval`]: IoU3D, one-pass-evaluation metrics, the stream simulator
//!   and real-time protocols.
//! - [`data`]: synthetic scenes, Lidar/label file formats, manifests,
//!   results serialization.
//! - [`config`]: flat `key = value` config files and dotted overrides.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod pillars;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
