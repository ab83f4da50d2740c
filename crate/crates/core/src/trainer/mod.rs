//! Continual trainer: per-task memory losses, gradient projection onto the
//! constraint cone of past-task gradients, and the outer scenario loop.

mod continual;
mod projection;
mod qp;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use continual::{load_plans, run_continual, ContinualConfig, DivergenceOverride, Mode, PhaseSummary, RunArtifacts};
pub use projection::{gradient_violations, project_gradient, ProjectionResult};
pub use qp::{qp_solve_dual, DualSolution};
pub use train::{
    previous_losses, train_scenario, write_history_csv, GradientModel, StepRecord, TaskLossSet, TrainingHistory,
};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("non-finite value in QP input")]
    NonFiniteInput,
    #[error("dual QP did not converge, KKT residual {residual:e}")]
    MaxIterations { residual: f64, best: Vec<f64> },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("memory pool for scenario {0} is empty")]
    EmptyBatch(u32),
    #[error("invalid trainer configuration: {0}")]
    BadConfig(String),
    #[error("scenario sequence is empty")]
    EmptySequence,
}

impl TrainerError {
    pub fn name(&self) -> &'static str {
        match self {
            TrainerError::NonFiniteInput => "NonFiniteInput",
            TrainerError::MaxIterations { .. } => "MaxIterations",
            TrainerError::ShapeMismatch(_) => "ShapeMismatch",
            TrainerError::EmptyBatch(_) => "EmptyBatch",
            TrainerError::BadConfig(_) => "BadConfig",
            TrainerError::EmptySequence => "EmptySequence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Bias toward past-task gradients added after projection.
    pub gamma: f64,
    pub eps_feas: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    /// Rescale the update to at most this norm; 0 disables.
    pub clip_norm: f64,
    /// Evaluate past-task gradients on the whole allocated pool every step
    /// instead of a resampled batch.
    pub full_memory_batches: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 250,
            batch_size: 128,
            gamma: 1e-3,
            eps_feas: 1e-8,
            qp_tol: 1e-8,
            qp_max_iter: 10_000,
            clip_norm: 0.0,
            full_memory_batches: false,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::BadConfig(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma must be nonnegative");
        }
        if !(self.eps_feas >= 0.0 && self.qp_tol > 0.0) {
            return bad("eps_feas must be nonnegative and qp_tol positive");
        }
        if self.qp_max_iter == 0 {
            return bad("qp_max_iter must be positive");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad("clip_norm must be nonnegative");
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
