//! Pseudo-LiDAR scene-flow pipeline.
//!
//! Turns dense depth or disparity maps into cleaned pseudo-LiDAR point
//! clouds and estimates per-point 3D scene flow by directly minimizing four
//! self-supervised losses (Chamfer, flow smoothness, Laplacian
//! regularization, disparity consistency) with a coarse-to-fine solver over
//! an explicit flow field. Includes the standard 3D/2D scene-flow metrics, a
//! synthetic-scene oracle for end-to-end evaluation, and bit-exact PFM/PLY/
//! JSON I/O.
//!
//! The usual dataflow is
//! depth → [`camera::backproject_depth_map`] → [`cloud::crop_edges`] →
//! [`cloud::remove_outliers`] → [`cloud::random_sample`] →
//! [`solver::solve`] → [`metrics::evaluate_3d`].

pub mod camera;
pub mod cloud;
mod error;
pub mod index;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod seed;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
