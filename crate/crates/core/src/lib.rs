//! Adaptive QM/MM coupling for point defects in a two-dimensional crystal.
//!
//! The quantum model is a single-orbital tight-binding Hamiltonian. Away from
//! the defect it is replaced by a second-order Taylor expansion of the
//! homogeneous site energy, and a residual-based force indicator drives the
//! growth of the QM and MM regions.

pub mod adaptive;
pub mod coupling;
pub mod error;
pub mod estimator;
pub mod geom;
pub mod harness;
pub mod io;
pub mod lattice;
pub mod mmpotential;
pub mod par;
pub mod reference;
pub mod tightbinding;

pub use error::{Error, Result};
pub use geom::Vec2;
