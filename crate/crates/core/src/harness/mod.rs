//! Desk-scale experiments: synthetic tasks, metrics, the experiment runner
//! and the cross-module verification suite.

pub mod checks;
pub mod experiment;
pub mod grid;
pub mod infill;
