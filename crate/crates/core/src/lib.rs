pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod mixing;
pub mod model;
pub mod nn;
pub mod raster;
pub mod sweep;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

/// Crate version plus `git describe` of the source tree it was built from.
pub const BUILD_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("SEGADAPT_GIT_DESCRIBE"));
