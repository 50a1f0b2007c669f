//! Multiplanar volumetric segmentation with 2D UNet-family cores.
//!
//! The pipeline: sample a set of view axes over the unit sphere, extract
//! isotropic 2D slice stacks along each axis, train a single 2D network on
//! slices from all axes, predict per axis, map predictions back onto the
//! voxel grid, and fuse the per-axis probability volumes with a learned
//! linear map. Evaluation is per-class Dice plus paired significance tests.
//!
//! Modules follow the data flow:
//! - [`volume`]: voxel containers, robust intensity scaling, phantoms, Dice
//! - [`multiplanar`]: view sampling, slice extraction, voxel-grid map-back
//! - [`augment`]: elastic slice deformation
//! - [`nn`]: a small exact-gradient computation graph for 2D convnets
//! - [`unetzoo`]: UNet / UNet2+ / UNet3+ builders and parameter accounting
//! - [`fusion`]: learned linear fusion of per-view probability volumes
//! - [`pipeline`]: folds, training loop, prediction, full experiments
//! - [`evalstats`]: paired t-test, Wilcoxon tests, box statistics

pub mod augment;
pub mod container;
pub mod error;
pub mod evalstats;
pub mod fusion;
pub mod multiplanar;
pub mod nn;
pub mod pipeline;
pub mod quantile;
pub mod unetzoo;
pub mod volume;

pub use error::{Error, Result};
