//! Collective decay of a thin resonant-nuclei film inside a planar x-ray
//! waveguide: mode solving, exciton dynamics, detector observables and
//! Poisson maximum-likelihood fitting.
//!
//! Units everywhere: nm, ns, keV, rad. See [`units`].

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod inference;
pub mod layered_medium;
pub mod mode_solver;
pub mod observables;
pub mod special;
pub mod units;

pub use error::{Error, Result};
pub use num_complex::Complex64;
