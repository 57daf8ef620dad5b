//! Hybrid intensity/geometric deformable registration and atlas-based segmentation.
//!
//! The crate is generic over the floating-point scalar ([`Real`], implemented for
//! `f32` and `f64`); the aliases below fix it to `f64`, which is what the command
//! line tool and the acceptance suite use.

pub mod atlas;
pub mod bspline;
pub mod config;
pub mod correspondence;
pub mod grid;
pub mod hybrid;
pub mod intensity_reg;
pub mod preprocess;
pub mod segment;
pub mod shape;
pub mod synth;
mod error;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Vector = grid::Vec3<f64>;
pub type Volume = grid::ScalarVolume<f64>;
pub type Field = grid::DisplacementField<f64>;
pub type Points = grid::PointSet<f64>;
pub type Mesh = grid::SurfaceMesh<f64>;
pub type Volume32 = grid::ScalarVolume<f32>;
pub type Field32 = grid::DisplacementField<f32>;
