//! Sidescan sonar to bathymetry.
//!
//! Stage one simulates and georeferences sidescan surveys over a known
//! seafloor and learns (or inverts in closed form) an inverse sensor model
//! from intensity to the seafloor normal projected into the sonar's lateral
//! plane. Stage two fits a sine-activated MLP height field to those normals
//! and to altimeter readings, then evaluates the result against the
//! reference grid.

pub mod autodiff;
pub mod config;
pub mod draping;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod geometry;
pub mod heightfield;
pub mod par;
pub mod recon;
pub mod survey;

pub use error::{Error, Result};
