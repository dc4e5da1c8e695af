//! Isotropic T2 mapping from simulated low-resolution fast-spin-echo
//! acquisitions: phantom simulation, the multi-slice acquisition model,
//! TV-regularized super-resolution reconstruction, voxel-wise exponential
//! fitting, and the quantitative evaluation metrics.

pub mod acquire;
pub mod analyze;
pub mod error;
pub mod phantom;
pub mod relaxfit;
pub mod srrecon;
pub mod volgrid;

pub use error::{Error, Result};
pub use volgrid::{read_volume, write_volume, Grid3D, Volume3D};
