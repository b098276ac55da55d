//! Camera-based, LiDAR-assisted feature fusion in quaternion space.
//!
//! The crate provides a small f64 tensor engine with reverse-mode autodiff,
//! quaternion Hamilton-product layers, point-cloud rasterization into BEV
//! grids and perspective depth maps, the depth/geometry embedding blocks
//! that thread LiDAR state through a detector, a toy BEV detector with a
//! synthetic scene generator, and an experiment harness that reproduces the
//! component/framework/axis ablations as seeded, CSV-reported runs.

pub mod autodiff;
pub mod config;
pub mod detect;
pub mod experiment;
pub mod fusion;
pub mod layers;
pub mod lidar;
pub mod quat;
pub mod scene;
pub mod snapshot;

mod error;

pub use autodiff::{Graph, ParamId, ParamStore, Tensor, TensorId};
pub use error::{Error, Result};
