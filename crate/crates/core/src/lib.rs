//! Continual learning for interaction-aware vehicle trajectory prediction.
//!
//! The crate trains a trajectory predictor over a sequence of traffic
//! scenarios without re-training on old data. Past scenarios are kept in a
//! bounded repository; gradients of the current task are projected so that
//! losses measured on stored memory do not increase (gradient episodic
//! memory). The amount of memory handed to each past task is set from a
//! Monte-Carlo estimate of the conditional KL divergence between scenarios.
//!
//! Module map:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`data`] | CSV ingestion, windowing into samples, splits, synthetic scenarios |
//! | [`nn`] | Flat parameter layout and dense layers with hand-written backprop |
//! | [`predictor`] | Reference predictor with a per-step bivariate Gaussian head |
//! | [`divergence`] | Interaction Laplacian, spectral conditions, MDN, CKLD |
//! | [`memory`] | Scenario repository and divergence-proportional allocation |
//! | [`trainer`] | Dual QP, gradient projection, scenario and sequence training |
//! | [`metrics`] | ADE/FDE, forgetting, time-to-conflict-point diagnostics |

pub mod data;
pub mod divergence;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
