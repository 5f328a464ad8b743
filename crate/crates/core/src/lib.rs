//! Time-consistent mean-variance investment under convex cone constraints.
//!
//! The crate computes, simulates and checks open-loop equilibrium strategies
//! for the wealth equation `dX = (r X + θ'u) ds + u'dW` with `u ∈ K`, a closed
//! convex cone, and the state-dependent objective
//! `J(t, x; u) = ½ Var_t(X_T) − μ₁ x E_t[X_T]`.
//!
//! * [`cone`] projects onto closed convex cones (closed forms and active-set NNLS).
//! * [`market`] holds the time grid, coefficient paths and the factor-driven
//!   risk premium model.
//! * [`equilibrium`] is the closed-form engine for deterministic coefficients,
//!   together with the precommitted benchmark and the adjoint processes.
//! * [`bsde`] solves the quadratic BSDE for `(M, U)` by regression Monte Carlo
//!   when the risk premium is random.
//! * [`montecarlo`] simulates wealth under feedback policies and runs the
//!   spike-variation equilibrium verifier.
//!
//! The crate is `no_std` (with `alloc`). The default `std` feature enables
//! rayon-backed parallelism; results are bit-identical with or without it.

#![no_std]
#![deny(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod bsde;
pub mod cone;
pub mod equilibrium;
mod error;
pub mod market;
pub mod math;
pub mod montecarlo;
mod parallel;
pub mod rng;

pub use error::{Error, Result};
