//! Reconstruction of incompressible-flow states and derived quantities from
//! sparse, voxel-averaged, beam-projected velocity measurements.

pub mod config;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod observation;
pub mod reduced;
pub mod ops;
pub mod pbdw;
pub mod pipeline;
pub mod qoi;
pub mod solver;
pub mod store;
pub mod spaces;
pub mod testutil;

pub use error::{Error, Result};
