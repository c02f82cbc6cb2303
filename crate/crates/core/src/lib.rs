//! Deterministic geometry and numerics for camera + 4D-radar BEV fusion:
//! calibrated projection, point cloud preparation, view transformation
//! (sampling and splatting lifts with depth/occupancy weighting), height
//! compression, center-based detection decoding, and AP evaluation.
//!
//! Everything is plain-CPU and reproducible: no learned backbones, no
//! global state, fixed seeds for anything random.

pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod io;
pub mod lifting;
pub mod nets;
pub mod pipeline;
pub mod pointcloud;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
