//! Experiment harness: phantom generation, training, evaluation,
//! temperature sweeps and run comparison.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod exit;
pub mod train;
