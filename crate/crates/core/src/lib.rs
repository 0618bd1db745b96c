//! Multi-task learning optimization lab.
//!
//! Implements task-allocation training schedules (full-task, stochastic,
//! interleaved, gap-delayed), task weighting strategies, gradient combiners,
//! and gradient-angle telemetry on top of a small recorded-tape autodiff
//! engine, with seeded synthetic benchmarks and a reproducible experiment
//! runner.

pub mod alloc;
pub mod combine;
pub mod config;
pub mod error;
pub mod fd;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tables;
pub mod tape;
pub mod telemetry;
pub mod tensor;
pub mod train;
pub mod weighting;

pub use error::{Error, Result};
