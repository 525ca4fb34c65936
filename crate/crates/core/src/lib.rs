//! Variance-reduced stochastic estimation of `tr A⁻¹` for γ5-Hermitian
//! lattice operators.
//!
//! The crate covers the whole pipeline at desk scale: the 2D Wilson operator
//! on a U(1) background ([`lattice`]), Krylov solvers and the truncated inverse
//! ([`krylov`]), adaptive two-grid setup ([`multigrid`]), an inexact
//! shift-and-invert eigensolver ([`eigen`]), hierarchical probing and dilution
//! ([`probing`]) and the deflated Hutchinson estimators ([`trace`]).

pub mod eigen;
pub mod error;
pub mod lattice;
pub mod krylov;
pub mod linalg;
pub mod multigrid;
pub mod probing;
pub mod trace;

pub use error::{Error, Result};
pub use linalg::C64;
