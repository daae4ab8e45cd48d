//! Relativistic beam dynamics on the unit hyperboloid.
//!
//! The crate integrates the Lorentz force as a geodesic flow of a velocity
//! dependent connection, builds the affine connection obtained by averaging
//! that connection against a particle ensemble, and compares the two flows.
//! The comparison covers single trajectories, whole ensembles (Vlasov
//! characteristics), mean-velocity fluid fields and linear beam optics from
//! the Jacobi equation.
//!
//! Units: q = m = c = 1. The metric is `diag(1, -1, -1, -1)`. Index 2 is the
//! beam axis in the accelerator presets, and 1 and 3 are the transverse axes.

pub mod analysis;
pub mod beamline;
pub mod cli;
pub mod connections;
pub mod distribution;
pub mod dynamics;
pub mod fields;
pub mod fluid;
pub mod geometry;

mod error;

pub use error::{Error, Result};

/// Spacetime point, 4-velocity or covector components.
pub type V4 = nalgebra::Vector4<f64>;
/// Real 4x4 matrix.
pub type M4 = nalgebra::Matrix4<f64>;
