//! Part-aware voxel shape modeling.
//!
//! An unlabeled occupancy grid is encoded into a single embedding, split into
//! `K` part embeddings by learned projection matrices, decoded part by part
//! into canonical volumes, and placed back into the shape by a 3D spatial
//! transformer. Because the part embeddings live in (approximately)
//! complementary subspaces, shapes can be edited by exchanging, mixing or
//! interpolating part embeddings.
//!
//! Modules, bottom up:
//!
//! - [`voxel`]: grids, binvox/PFLG1/OBJ I/O, part extraction, graph-cut labeling, metrics
//! - [`synthdata`]: procedural labeled chairs and tables
//! - [`autodiff`]: reverse-mode tape, trilinear grid sampler, Adam, checkpoints
//! - [`decomposer`]: shape encoder and projection layers
//! - [`composer`]: shared part decoder, localization net, assembly
//! - [`model`]: the assembled network and batched inference
//! - [`training`]: losses, cycle mixing, staged training
//! - [`eval`]: reconstruction / swap / mix / interpolation experiments and metric tables
//! - [`cli`]: the `shapefactor` command line

pub mod autodiff;
pub mod cli;
pub mod composer;
pub mod decomposer;
pub mod error;
pub mod eval;
mod layers;
pub mod model;
pub mod synthdata;
pub mod training;
pub mod voxel;

pub use error::{Error, Result};
