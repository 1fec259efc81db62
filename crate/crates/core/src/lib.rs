//! Sparse hierarchical voxel neural fields.
//!
//! Pixels are lifted into a contracted world through two-stage categorical
//! depth, fused into a fine and a coarse sparse grid, and volume rendered back
//! into feature, RGB, depth and opacity images. Everything is differentiable
//! through a small reverse-mode tape so the whole pipeline can be fitted to
//! ingested target images.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod fit;
pub mod frustum;
pub mod geometry;
pub mod harness;
pub mod objectives;
pub mod optim;
pub mod renderer;
pub mod voxelgrid;
pub mod tensor_io;

pub use error::{Error, Result};
