//! Point-cloud part segmentation from RBF subvoxel grids.
//!
//! The pipeline turns a cloud into a `D x H x W x k^3` grid of radial basis
//! function responses, compresses every voxel block into a latent code with a
//! small VAE, runs rotation/mirror-equivariant 3D convolutions over the latent
//! grid and fuses the resulting global descriptor with per-point features to
//! score every point.

pub mod config;
pub mod error;
pub mod formats;
pub mod gconv;
pub mod metrics;
pub mod group;
pub mod harness;
pub mod nn;
pub mod pointcloud;
pub mod segnet;
pub mod synth;
pub mod vae;
pub mod voxelizer;

pub use error::{Error, Result};
