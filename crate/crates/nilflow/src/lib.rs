//! Simulator and verification suite for four-dimensional generalized Ricci
//! flow with a three-dimensional nilpotent symmetry over a circle.
//!
//! The invariant flow reduces to a coupled parabolic system on S^1 for the
//! fiber metric `G` (3x3 SPD), the base metric `g` (a positive scalar), the
//! principal connection coefficients `a`, and the closed three-form split into
//! a constant vertical component `h0` and mixed components `m`. This crate
//! integrates that system, tracks the sharp t^{-1} decay monitors and the
//! monotone energy functional, certifies the scalar evolution identities
//! numerically, and compares parabolic blowdowns of computed trajectories to
//! the canonical limit family.

pub mod algebra;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod limits;
pub mod ode;
pub mod verify;

pub use error::Error;

/// 3x3 real matrix used for the fiber metric, its derivatives, and the mixed
/// torsion components.
pub type Mat3 = nalgebra::Matrix3<f64>;
/// Fiber vector (connection coefficients, center direction, ...).
pub type Vec3 = nalgebra::Vector3<f64>;

#[cfg(test)]
pub(crate) mod brute;
