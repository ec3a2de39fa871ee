//! Quasi-stochastic approximation with sinusoidal probing.
//!
//! Deterministic probing signals, QSA vector fields (qSGD, ESC, linear examples),
//! a fixed-step Euler integrator, output filters and bias diagnostics.

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod integrator;
pub mod objectives;
pub mod probing;

pub use error::{QsaError, Result};
