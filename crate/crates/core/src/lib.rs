//! Sparse non-rigid shape matching with certified global optimality.
//!
//! The pipeline: load keypoint-annotated shapes ([`mesh`], [`io`]), build the
//! projected Laplacian ([`operators`]) and orientation features
//! ([`spectral`]), prune candidate matches by geodesic histograms
//! ([`geodesics`]), assemble the mixed-integer objective ([`model`]) and solve
//! it with branch-and-bound ([`solver`]). [`eval`] holds the metrics.

pub mod error;
pub mod eval;
pub mod geodesics;
pub mod io;
pub mod model;
pub mod mesh;
pub mod operators;
pub mod reduced;
pub mod solver;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
