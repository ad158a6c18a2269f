//! Primal-dual valuation of discrete-monitoring optimal stopping problems
//! on Itô diffusions.
//!
//! The dual side learns, date by date, a neural integrand whose discrete
//! stochastic integral against the simulated Brownian increments forms a
//! martingale; plugging that martingale into the pathwise dual recursion
//! gives an upper bound on the stopping value. The primal side learns
//! stopping decisions directly and yields the matching lower bound. An
//! exact finite-state lattice oracle makes the underlying duality
//! identities testable without sampling noise.

pub mod dual;
pub mod primal;
pub mod error;
pub mod experiment;
pub mod lattice;
pub mod market;
pub mod nn;
pub mod seeds;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
