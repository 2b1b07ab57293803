//! Readers and writers for the on-disk artifacts: PFM grids, PLY clouds and
//! flow fields, and strict JSON configs/reports.

mod json;
mod pfm;
mod ply;

pub use json::{read_camera_file, read_json, write_json, CameraFile};
pub use pfm::{read_pfm, write_pfm};
pub use ply::{read_ply, write_ply, PlyData, PlyFormat};
