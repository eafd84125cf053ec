//! Learned-prior surface reconstruction with flat 2D Gaussian splats anchored
//! on a sparse latent voxel grid.
//!
//! The crate is organized bottom-up:
//!
//! - [`scene_io`]: scenes on disk, synthetic rooms
//! - [`voxel_grid`]: sparse hashed voxels with latent features and occupancy
//! - [`splat_model`]: the per-voxel decoder from latents to splats
//! - [`renderer`]: differentiable tiled rasterizer with an analytic backward pass
//! - [`losses`]: image, depth, normal, distortion and occupancy objectives
//! - [`nets`]: reverse-mode tape, sparse convolutions and the three prior networks
//! - [`pipeline`]: gradient accumulation, the densify/optimize loop, training
//! - [`meshing`]: TSDF fusion, marching cubes and evaluation metrics
//!
//! With the default `parallel` feature the heavy loops run on rayon; without it
//! they run sequentially with bit-identical results.

pub mod error;
pub mod geometry;
pub mod losses;
pub mod meshing;
pub mod nets;
pub mod renderer;
pub mod par;
pub mod pipeline;
pub mod scene_io;
pub mod splat_model;
pub mod tensor;
pub mod voxel_grid;

pub use error::{Error, Result};
