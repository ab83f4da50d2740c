//! Displacement errors, forgetting increments and the ΔTTCP interaction
//! diagnostic.

mod ttcp;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Position, ScenarioDataset, TrajectorySample};
use crate::predictor::{mean_trajectory, Predictor};
use crate::Result;

type MResult<T> = std::result::Result<T, MetricsError>;

pub use ttcp::{interaction_density, ttcp_min, PathTrack, PairTtcp, TtcpConfig, TtcpReport, TtcpResult};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("scenario {0} has no evaluation right after it was learned")]
    MissingBaseline(u32),
    #[error("paths never come within the conflict radius of the conflict point")]
    NoConflict,
    #[error("no frame in the window has both vehicles moving toward the conflict point")]
    NoValidFrames,
}

impl MetricsError {
    pub fn name(&self) -> &'static str {
        match self {
            MetricsError::Empty => "Empty",
            MetricsError::ShapeMismatch(_) => "ShapeMismatch",
            MetricsError::MissingBaseline(_) => "MissingBaseline",
            MetricsError::NoConflict => "NoConflict",
            MetricsError::NoValidFrames => "NoValidFrames",
        }
    }
}

fn dist(a: Position, b: Position) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check(pred: &[Vec<Position>], truth: &[Vec<Position>]) -> MResult<()> {
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    if pred.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} predictions for {} ground truths",
            pred.len(),
            truth.len()
        )));
    }
    let t_f = truth[0].len();
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.len() != t.len() || t.len() != t_f || t_f == 0 {
            return Err(MetricsError::ShapeMismatch(format!(
                "sample {i}: prediction has {} steps, ground truth {}",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// Mean Euclidean displacement over all samples and steps.
pub fn ade(pred: &[Vec<Position>], truth: &[Vec<Position>]) -> MResult<f64> {
    check(pred, truth)?;
    let steps = (pred.len() * truth[0].len()) as f64;
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| dist(*a, *b)).sum::<f64>())
        .sum();
    Ok(total / steps)
}

/// Mean Euclidean displacement at the final step.
pub fn fde(pred: &[Vec<Position>], truth: &[Vec<Position>]) -> MResult<f64> {
    check(pred, truth)?;
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| dist(p[p.len() - 1], t[t.len() - 1]))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Unweighted mean over learned scenarios. Accumulated as offsets from the
/// first value, so identical inputs return that value exactly.
pub fn average_error(values: &[f64]) -> MResult<f64> {
    let first = *values.first().ok_or(MetricsError::Empty)?;
    Ok(first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEval {
    pub scenario_id: u32,
    pub name: String,
    pub ade: f64,
    pub fde: f64,
    pub n_ts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub checkpoint: String,
    /// Scenario trained in the phase that produced this report; `None` for a
    /// joint run.
    pub trained_scenario: Option<u32>,
    pub scenarios: Vec<ScenarioEval>,
    pub average_ade: f64,
    pub average_fde: f64,
}

impl EvalReport {
    pub fn get(&self, scenario_id: u32) -> Option<&ScenarioEval> {
        self.scenarios.iter().find(|s| s.scenario_id == scenario_id)
    }
}

/// ADE and FDE of the mean predicted trajectory on a set of samples.
pub fn evaluate_samples(predictor: &Predictor, theta: &[f64], samples: &[&TrajectorySample]) -> Result<(f64, f64)> {
    let preds = samples
        .iter()
        .map(|s| Ok(mean_trajectory(&predictor.forward(theta, s)?)))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<Vec<Position>> = samples.iter().map(|s| s.target_future.clone()).collect();
    Ok((ade(&preds, &truth)?, fde(&preds, &truth)?))
}

/// Evaluate on the test split of every scenario given, in order.
pub fn evaluate(
    predictor: &Predictor,
    theta: &[f64],
    scenarios: &[&ScenarioDataset],
    mode: &str,
    checkpoint: &str,
    trained_scenario: Option<u32>,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(scenarios.len());
    for d in scenarios {
        let test = d.test();
        let (ade, fde) = evaluate_samples(predictor, theta, &test)?;
        rows.push(ScenarioEval {
            scenario_id: d.scenario_id,
            name: d.name.clone(),
            ade,
            fde,
            n_ts: test.len(),
        });
    }
    Ok(EvalReport {
        mode: mode.to_string(),
        checkpoint: checkpoint.to_string(),
        trained_scenario,
        average_ade: average_error(&rows.iter().map(|r| r.ade).collect::<Vec<_>>())?,
        average_fde: average_error(&rows.iter().map(|r| r.fde).collect::<Vec<_>>())?,
        scenarios: rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingEntry {
    pub scenario_id: u32,
    pub name: String,
    pub then_ade: f64,
    pub now_ade: f64,
    pub increment_ade: f64,
    pub percent_ade: f64,
    pub then_fde: f64,
    pub now_fde: f64,
    pub increment_fde: f64,
    pub percent_fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub entries: Vec<ForgettingEntry>,
}

impl ForgettingReport {
    pub fn get(&self, scenario_id: u32) -> Option<&ForgettingEntry> {
        self.entries.iter().find(|e| e.scenario_id == scenario_id)
    }
}

fn percent(then: f64, now: f64) -> f64 {
    if then == 0.0 {
        0.0
    } else {
        (now - then) / then * 100.0
    }
}

/// Error increments of every scenario in the latest report relative to the
/// report taken right after that scenario was last trained.
pub fn forgetting(history: &[EvalReport]) -> MResult<ForgettingReport> {
    let last = history.last().ok_or(MetricsError::Empty)?;
    let mut baseline: BTreeMap<u32, &ScenarioEval> = BTreeMap::new();
    for report in history {
        if let Some(id) = report.trained_scenario {
            if let Some(e) = report.get(id) {
                baseline.insert(id, e);
            }
        }
    }
    let entries = last
        .scenarios
        .iter()
        .map(|now| {
            let then = baseline
                .get(&now.scenario_id)
                .ok_or(MetricsError::MissingBaseline(now.scenario_id))?;
            Ok(ForgettingEntry {
                scenario_id: now.scenario_id,
                name: now.name.clone(),
                then_ade: then.ade,
                now_ade: now.ade,
                increment_ade: now.ade - then.ade,
                percent_ade: percent(then.ade, now.ade),
                then_fde: then.fde,
                now_fde: now.fde,
                increment_fde: now.fde - then.fde,
                percent_fde: percent(then.fde, now.fde),
            })
        })
        .collect::<MResult<_>>()?;
    Ok(ForgettingReport { entries })
}
