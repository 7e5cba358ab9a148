//! Simulation of energy-based quantum state reduction.
//!
//! The reduction dynamics admit a closed-form solution: sample the terminal
//! energy level, drive a Brownian signal toward it, and recover the full
//! state trajectory algebraically by Bayes conditioning on the signal. The
//! [`closedform`] module implements that engine; [`sde_reference`] provides
//! a direct Euler-Maruyama integration of the nonlinear reduction SDE used
//! to validate it pathwise; [`ensemble`] runs seeded Monte Carlo ensembles
//! and checks the martingale, potential, and reduction-timescale laws.

pub mod cli;
pub mod closedform;
pub mod ensemble;
pub mod model;
pub mod sde_reference;
pub mod validation;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
