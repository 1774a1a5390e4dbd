//! Relaxation of a bending filament whose motion is damped by age-structured
//! elastic linkages.
//!
//! The unknown `z(s, t)` on an interval `I = (0, L)` evolves under a penalized
//! fourth-order flow: a memory operator built from a linkage-age kernel
//! `rho(s, a)` balances the bending term `z''''` and the double-well gradient
//! term `(F'(z'))'`, `F(x) = (x^2 - 1)^2`, with natural boundary conditions
//! `z'' = 0`, `z''' = F'(z')`. The memory scale `eps` penalizes how far the
//! current state may drift from its own recent history; sending `eps -> 0`
//! yields a friction-type parabolic limit `b dz/dt + z'''' = (F'(z'))'` with
//! `b = mu1 = int a rho da`.
//!
//! Module map:
//! - [`kernel`]: linkage-age kernels, their moments and admissibility checks.
//! - [`elliptic`]: complete elliptic integrals and Jacobi `sn`, the basis of
//!   the closed-form steady states.
//! - [`steady`]: the steady-state atlas (branch census, profiles, energies).
//! - [`spatial`]: H2-conforming cubic Hermite discretization, weighted forms,
//!   banded solvers, and the penalized resolvent.
//! - [`delay`]: history buffers and the delayed source / invariant / energy
//!   quadratures aligned with the time grid.
//! - [`evolve`]: the delayed fixed-point stepper and the limit-problem
//!   backward Euler stepper, plus stabilization detection.
//! - [`diagnostics`]: energy series, eps-sweeps, and log-log slope fits.
//! - [`config`]: run configuration (JSON), validation, and output writers.

pub mod config;
pub mod delay;
pub mod diagnostics;
pub mod elliptic;
mod error;
pub mod evolve;
pub mod guide;
pub mod kernel;
pub mod profile;
pub mod quad;
pub mod spatial;
pub mod steady;

pub use error::{Error, Result};

/// Double-well potential `F(x) = (x^2 - 1)^2`.
pub fn double_well(x: f64) -> f64 {
    let q = x * x - 1.0;
    q * q
}

/// `F'(x) = 4x(x^2 - 1)`.
pub fn double_well_d(x: f64) -> f64 {
    4.0 * x * (x * x - 1.0)
}

/// `F''(x) = 12x^2 - 4`.
pub fn double_well_dd(x: f64) -> f64 {
    12.0 * x * x - 4.0
}
