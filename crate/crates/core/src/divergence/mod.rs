//! Traffic divergence between scenarios.
//!
//! Each prediction sample becomes a case `(condition, future)`: the condition
//! concatenates the downsampled target history with the `k` smallest
//! eigenvectors of a time-decayed interaction Laplacian over the surrounding
//! vehicles. A mixture density network per scenario estimates `p(future |
//! condition)`, and the conditional KL divergence between two scenarios is the
//! Monte-Carlo KL averaged over the first scenario's conditions.

mod condition;
mod eigen;
mod laplacian;
mod mdn;
mod mixture;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use condition::{build_condition, ConditionConfig, DivergenceCase};
pub use eigen::{canonical_sign, spectral_features, symmetric_eigen};
pub use laplacian::{interaction_laplacian, InteractionLaplacian, FAR_DISTANCE};
pub use mdn::{fit_mdn, MdnConfig, MdnModel};
pub use mixture::{mc_kld, GaussianMixture, KldEstimate, LOG_DENSITY_FLOOR};

use crate::data::TrajectorySample;
use crate::rng;

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("insufficient data: {required} cases required, {available} available")]
    InsufficientData { required: usize, available: usize },
    #[error("non-finite loss while fitting the mixture density network (epoch {epoch})")]
    NonFiniteLoss { epoch: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("lambda_decay must lie in (0, 1], got {0}")]
    BadLambda(f64),
    #[error("weight must lie in [0, 1], got {0}")]
    BadWeight(f64),
    #[error("k = {k} exceeds the {n} available eigenvectors")]
    KTooLarge { k: usize, n: usize },
    #[error("no conditions to average over")]
    EmptyConditions,
}

impl DivergenceError {
    pub fn name(&self) -> &'static str {
        match self {
            DivergenceError::InsufficientData { .. } => "InsufficientData",
            DivergenceError::NonFiniteLoss { .. } => "NonFiniteLoss",
            DivergenceError::ShapeMismatch(_) => "ShapeMismatch",
            DivergenceError::DimensionMismatch { .. } => "DimensionMismatch",
            DivergenceError::BadLambda(_) => "BadLambda",
            DivergenceError::BadWeight(_) => "BadWeight",
            DivergenceError::KTooLarge { .. } => "KTooLarge",
            DivergenceError::EmptyConditions => "EmptyConditions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceConfig {
    pub condition: ConditionConfig,
    pub mdn: MdnConfig,
    pub n_mc: usize,
    /// Conditions averaged per direction, chosen uniformly at `seed`.
    pub max_conditions: usize,
    /// Weight of the current scenario's direction.
    pub w1: f64,
    pub seed: u64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            condition: ConditionConfig::default(),
            mdn: MdnConfig::default(),
            n_mc: 100,
            max_conditions: 2000,
            w1: 0.5,
            seed: 0,
        }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<(), DivergenceError> {
        self.condition.validate()?;
        if !(0.0..=1.0).contains(&self.w1) {
            return Err(DivergenceError::BadWeight(self.w1));
        }
        if self.n_mc == 0 || self.max_conditions == 0 || self.mdn.k == 0 {
            return Err(DivergenceError::ShapeMismatch(
                "n_mc, max_conditions and mdn.k must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn cases_from_samples(
    samples: &[&TrajectorySample],
    cfg: &ConditionConfig,
) -> Result<Vec<DivergenceCase>, DivergenceError> {
    samples.par_iter().map(|s| build_condition(s, cfg)).collect()
}

/// Up to `cap` conditions drawn uniformly without replacement at `seed`,
/// kept in their original order.
pub fn select_conditions(cases: &[DivergenceCase], cap: usize, seed: u64) -> Vec<Vec<f64>> {
    if cases.len() <= cap {
        return cases.iter().map(|c| c.condition.clone()).collect();
    }
    let mut idx = sample_indices(&mut rng::stream(seed, 0xC0D), cases.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cases[i].condition.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkldEstimate {
    pub value: f64,
    /// Monte-Carlo standard error of `value`.
    pub std_error: f64,
    pub floored: usize,
    pub n_conditions: usize,
}

/// Mean over `conditions` of `KL(p_1(·|x) ‖ p_2(·|x))`.
///
/// The Monte-Carlo stream of each condition is keyed by its content, so
/// duplicated conditions draw identical samples and evaluation order never
/// matters.
pub fn ckld(
    model_1: &MdnModel,
    model_2: &MdnModel,
    conditions: &[Vec<f64>],
    n_mc: usize,
    seed: u64,
) -> Result<CkldEstimate, DivergenceError> {
    if model_1.input_dim != model_2.input_dim {
        return Err(DivergenceError::DimensionMismatch {
            left: model_1.input_dim,
            right: model_2.input_dim,
        });
    }
    if model_1.output_dim != model_2.output_dim {
        return Err(DivergenceError::DimensionMismatch {
            left: model_1.output_dim,
            right: model_2.output_dim,
        });
    }
    if conditions.is_empty() {
        return Err(DivergenceError::EmptyConditions);
    }
    let per: Vec<KldEstimate> = conditions
        .par_iter()
        .map(|x| {
            let p1 = model_1.mixture_at(x)?;
            let p2 = model_2.mixture_at(x)?;
            mc_kld(&p1, &p2, n_mc, rng::derive_seed(seed, rng::hash_f64s(x)))
        })
        .collect::<Result<_, _>>()?;
    let n = per.len() as f64;
    Ok(CkldEstimate {
        value: per.iter().map(|e| e.mean).sum::<f64>() / n,
        std_error: per.iter().map(|e| e.std_error * e.std_error).sum::<f64>().sqrt() / n,
        floored: per.iter().map(|e| e.floored).sum(),
        n_conditions: per.len(),
    })
}

/// `w1 · ckld_12 + (1 − w1) · ckld_21`.
pub fn weighted_ckld(ckld_12: f64, ckld_21: f64, w1: f64) -> Result<f64, DivergenceError> {
    if !(0.0..=1.0).contains(&w1) {
        return Err(DivergenceError::BadWeight(w1));
    }
    Ok(w1 * ckld_12 + (1.0 - w1) * ckld_21)
}

/// Per-scenario inputs to [`measure_divergence`].
#[derive(Debug, Clone)]
pub struct ScenarioCases {
    pub name: String,
    pub scenario_id: u32,
    pub cases: Vec<DivergenceCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub scenarios: Vec<String>,
    pub scenario_ids: Vec<u32>,
    /// `directed[i][j] = CKLD(p_i ‖ p_j)` over conditions of scenario `i`.
    pub directed: Vec<Vec<f64>>,
    pub directed_std_error: Vec<Vec<f64>>,
    /// `weighted[i][j] = w1 · directed[i][j] + w2 · directed[j][i]`, with `i`
    /// the current scenario.
    pub weighted: Vec<Vec<f64>>,
    /// Three Monte-Carlo standard errors of each weighted value.
    pub noise_bound: Vec<Vec<f64>>,
    pub floored: Vec<Vec<usize>>,
    pub w1: f64,
    pub w2: f64,
    pub n_mc: usize,
    pub n_cases: Vec<usize>,
    pub n_conditions: Vec<usize>,
    pub log_density_floor: f64,
    pub imputed_cases: Vec<usize>,
    pub config: DivergenceConfig,
}

/// Fit one MDN per scenario and fill the directed and weighted matrices.
pub fn measure_divergence(
    scenarios: &[ScenarioCases],
    cfg: &DivergenceConfig,
) -> Result<(DivergenceReport, Vec<MdnModel>), DivergenceError> {
    cfg.validate()?;
    let models: Vec<MdnModel> = scenarios
        .iter()
        .map(|s| fit_mdn(&s.cases, &cfg.mdn))
        .collect::<Result<_, _>>()?;
    let conditions: Vec<Vec<Vec<f64>>> = scenarios
        .iter()
        .map(|s| select_conditions(&s.cases, cfg.max_conditions, cfg.seed))
        .collect();
    let n = scenarios.len();
    let mut est = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                est[i][j] = Some(ckld(&models[i], &models[j], &conditions[i], cfg.n_mc, cfg.seed)?);
            }
        }
    }
    let get = |i: usize, j: usize, f: fn(&CkldEstimate) -> f64| est[i][j].as_ref().map_or(0.0, f);
    let w2 = 1.0 - cfg.w1;
    let directed: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| get(i, j, |e| e.value)).collect()).collect();
    let se: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| get(i, j, |e| e.std_error)).collect()).collect();
    let weighted = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| weighted_ckld(directed[i][j], directed[j][i], cfg.w1))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let noise_bound = (0..n)
        .map(|i| (0..n).map(|j| 3.0 * (cfg.w1 * se[i][j] + w2 * se[j][i])).collect())
        .collect();
    let floored = (0..n)
        .map(|i| (0..n).map(|j| est[i][j].as_ref().map_or(0, |e| e.floored)).collect())
        .collect();
    let report = DivergenceReport {
        scenarios: scenarios.iter().map(|s| s.name.clone()).collect(),
        scenario_ids: scenarios.iter().map(|s| s.scenario_id).collect(),
        directed,
        directed_std_error: se,
        weighted,
        noise_bound,
        floored,
        w1: cfg.w1,
        w2,
        n_mc: cfg.n_mc,
        n_cases: scenarios.iter().map(|s| s.cases.len()).collect(),
        n_conditions: conditions.iter().map(Vec::len).collect(),
        log_density_floor: LOG_DENSITY_FLOOR,
        imputed_cases: scenarios.iter().map(|s| s.cases.iter().filter(|c| c.imputed).count()).collect(),
        config: cfg.clone(),
    };
    Ok((report, models))
}
