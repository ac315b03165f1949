//! Numerical laboratory for the fourth-order curvature prescription problem
//! on round spheres `S^n`, `n ≥ 5`.
//!
//! The conformally covariant operator studied here is
//!
//! ```text
//! P u = Δ²u − c_n Δu + d_n u,      c_n = (n² − 2n − 4)/2,
//!                                  d_n = n (n² − 4)(n − 4)/16,
//! ```
//!
//! and the equation of interest is `P u = K u^{(n+4)/(n−4)}`, `u > 0`, for a
//! prescribed positive function `K`. For `K ≡ 1` the solutions form an
//! explicit family of "bubbles" concentrating at a point as their scale
//! parameter `λ` grows. The crate provides, at desk scale:
//!
//! * [`sphere`] — geometry of `S^n`, dimension constants, curvature-function
//!   families with derivative oracles, and concentration-adapted quadrature;
//! * [`bubbles`] — the bubble family, its parameter derivatives, interaction
//!   coefficients and the `⟨·,·⟩_P` pairing reduced to `L²` integrals;
//! * [`functional`] — the Euler energy `J`, its asymptotic expansion with
//!   remainder-order verification, gradient pairings and the normal form `Ψ`;
//! * [`flow`] — a pseudogradient flow on the concentration parameters
//!   `(a, λ)` and the classification of its blow-up orbits;
//! * [`morse`] — critical-point analysis of `K`, Morse complexes over `Z/2`,
//!   assumption checkers and a `C¹`-small Laplacian-sign-flipping perturbation;
//! * [`axisym`] — an axially symmetric spectral discretisation of `P` with a
//!   damped Newton solver for the full equation;
//! * [`config`], [`report`], [`cli`] — a deterministic batch experiment
//!   harness with CSV/JSON reports.
//!
//! The mdBook under `book/` walks through the same material chapter by
//! chapter; its code listings are compiled and run as doc-tests (see
//! `src/book_tests.rs`), so the guide cannot silently drift from the API.

pub mod axisym;
pub mod bubbles;
pub mod cli;
pub mod config;
pub mod flow;
pub mod functional;
pub mod morse;
pub mod report;
pub mod sphere;

#[cfg(doctest)]
mod book_tests;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument left the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Stereographic projection evaluated at its pole.
    #[error("stereographic singularity: point coincides with the pole")]
    ChartSingularity,
    /// A quadrature budget below the documented minimum.
    #[error("quadrature budget {given} too small, need at least {required}")]
    BudgetTooSmall { given: usize, required: usize },
    /// Two independent computations of the same quantity disagree.
    #[error("internal consistency failure: {0}")]
    InternalConsistency(String),
    /// A quantity sits on a sign boundary the analysis requires to be strict.
    #[error("degeneracy: {0}")]
    Degenerate(String),
    /// Flow-state or tolerance configuration is contradictory.
    #[error("configuration error: {0}")]
    Config(String),
    /// ODE integration failed (step-size underflow or budget exhaustion).
    #[error("integration error: {0}")]
    Integration(String),
    /// Requested combination is outside the implemented reductions.
    #[error("not implemented: {0}")]
    NotImplemented(String),
    /// Underlying I/O failure while writing reports.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
