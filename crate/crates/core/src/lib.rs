//! Multiscale finite element methods for the Poisson problem on perforated
//! domains.
//!
//! The library builds multiscale basis functions (Crouzeix-Raviart edge
//! functions with bubble enrichment, plus the classical linear, oscillatory
//! and oversampling variants) on a coarse quadrangle mesh of the unit square,
//! using a shared uniform fine grid on which the perforations are handled by
//! penalization. A fine-grid reference solver, a periodic cell (corrector)
//! solver, error norms and an experiment harness complete the toolbox.

pub mod analysis;
pub mod coarse_solver;
pub mod error;
pub mod field;
pub mod fine_fem;
pub mod geometry;
pub mod linalg;
pub mod mesh;
pub mod msfem1d;
pub mod msfem_basis;
pub mod rng;

pub use error::{Error, Result};
pub use field::ScalarField;
pub use geometry::{PerforationSet, Point2};
pub use mesh::{CoarseMesh, FineGrid};
