//! Step-boundary trajectory analysis for chain-of-thought reasoning.
//!
//! A reasoning trace is the sequence of hidden-state snapshots taken at each
//! step boundary and at the final answer marker. This crate stores such
//! traces, fits probes and correctness predictors on them, measures how
//! trajectories diverge between correct and incorrect runs, and applies
//! steering interventions. A synthetic reasoning process with a closed
//! intervention loop stands in for a real model so every analysis can be
//! exercised end to end.

pub mod acceptance;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod kvconfig;
pub mod predictor;
pub mod probes;
pub mod report;
pub mod stats;
pub mod steering;
pub mod trace;

pub use error::{Error, Result};
