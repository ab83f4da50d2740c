use serde::{Deserialize, Serialize};

use super::{interaction_laplacian, spectral_features, DivergenceError};
use crate::data::{Position, TrajectorySample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    /// Number of Laplacian eigenvectors.
    pub k: usize,
    pub lambda_decay: f64,
    /// Keep every `downsample`-th frame, aligned to the last observed frame.
    pub downsample: usize,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            k: 3,
            lambda_decay: 0.9,
            downsample: 5,
        }
    }
}

impl ConditionConfig {
    pub fn validate(&self) -> Result<(), DivergenceError> {
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return Err(DivergenceError::BadLambda(self.lambda_decay));
        }
        if self.downsample == 0 {
            return Err(DivergenceError::ShapeMismatch("downsample must be at least 1".into()));
        }
        Ok(())
    }

    pub fn condition_len(&self, history_frames: usize, n_slots: usize) -> usize {
        2 * history_frames.div_ceil(self.downsample) + self.k * n_slots
    }
}

/// One divergence case: the condition vector and the flattened future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCase {
    pub condition: Vec<f64>,
    pub future: Vec<f64>,
    /// At least one neighbor slot was absent and imputed.
    pub imputed: bool,
}

/// History frames kept by downsampling, ending at the last observed frame.
fn history_indices(len: usize, step: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).rev().step_by(step).collect();
    idx.reverse();
    idx
}

/// Future frames kept by downsampling: `step−1, 2·step−1, …`.
fn future_indices(len: usize, step: usize) -> Vec<usize> {
    (step - 1..len).step_by(step).collect()
}

fn pick(ps: &[Position], idx: &[usize]) -> Vec<Position> {
    idx.iter().map(|&i| ps[i]).collect()
}

/// Build `[downsampled target history, v_1, …, v_k]` and the downsampled
/// future. The Laplacian is taken over the neighbor slots of the sample on
/// the downsampled history frames.
pub fn build_condition(sample: &TrajectorySample, cfg: &ConditionConfig) -> Result<DivergenceCase, DivergenceError> {
    cfg.validate()?;
    let hidx = history_indices(sample.target_history.len(), cfg.downsample);
    let fidx = future_indices(sample.target_future.len(), cfg.downsample);
    let neighbors: Vec<Option<Vec<Position>>> = sample
        .neighbors
        .iter()
        .map(|n| {
            n.as_ref().map(|n| {
                if n.positions.len() != sample.target_history.len() {
                    return Err(DivergenceError::ShapeMismatch(format!(
                        "neighbor {} has {} frames",
                        n.track_id,
                        n.positions.len()
                    )));
                }
                Ok(pick(&n.positions, &hidx))
            })
            .transpose()
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<Option<&[Position]>> = neighbors.iter().map(|n| n.as_deref()).collect();
    let lap = interaction_laplacian(&refs, cfg.lambda_decay)?;
    let vectors = spectral_features(&lap, cfg.k)?;

    let mut condition: Vec<f64> = pick(&sample.target_history, &hidx).into_iter().flatten().collect();
    condition.extend(vectors.into_iter().flatten());
    let future = pick(&sample.target_future, &fidx).into_iter().flatten().collect();
    Ok(DivergenceCase {
        condition,
        future,
        imputed: lap.imputed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NeighborHistory;

    fn sample(history: usize, future: usize, present: usize) -> TrajectorySample {
        let line = |y: f64, n: usize| (0..n).map(|k| [k as f64, y]).collect::<Vec<_>>();
        TrajectorySample {
            scenario_id: 0,
            target_id: 0,
            last_observed_frame: history as i64 - 1,
            target_history: line(0.0, history),
            neighbors: (0..5)
                .map(|i| {
                    (i < present).then(|| NeighborHistory {
                        track_id: i as i64 + 1,
                        positions: line(3.0 * (i + 1) as f64, history),
                    })
                })
                .collect(),
            target_future: (0..future).map(|k| [(history + k) as f64, 0.0]).collect(),
        }
    }

    #[test]
    fn default_condition_has_23_entries_and_16_dim_future() {
        let case = build_condition(&sample(20, 40, 5), &ConditionConfig::default()).unwrap();
        assert_eq!(case.condition.len(), 23);
        assert_eq!(ConditionConfig::default().condition_len(20, 5), 23);
        assert_eq!(case.future.len(), 16);
        assert!(!case.imputed);
        // end-aligned history frames 4, 9, 14, 19
        assert_eq!(&case.condition[..8], &[4.0, 0.0, 9.0, 0.0, 14.0, 0.0, 19.0, 0.0]);
        // future frames 4, 9, …, 39 after the last observed frame
        assert_eq!(case.future[0], 24.0);
        assert_eq!(case.future[14], 59.0);
    }

    #[test]
    fn no_downsampling_gives_55_entries() {
        let cfg = ConditionConfig {
            downsample: 1,
            ..ConditionConfig::default()
        };
        let case = build_condition(&sample(20, 40, 3), &cfg).unwrap();
        assert_eq!(case.condition.len(), 55);
        assert_eq!(case.future.len(), 80);
    }

    #[test]
    fn lonely_target_gets_the_imputed_constant_block() {
        let cfg = ConditionConfig::default();
        let a = build_condition(&sample(20, 40, 0), &cfg).unwrap();
        let mut other = sample(20, 40, 0);
        other.target_history.iter_mut().for_each(|p| p[1] += 7.0);
        let b = build_condition(&other, &cfg).unwrap();
        assert!(a.imputed);
        assert_eq!(a.condition[8..], b.condition[8..]);
        assert!(a.condition.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_many_eigenvectors() {
        let cfg = ConditionConfig {
            k: 6,
            ..ConditionConfig::default()
        };
        assert!(matches!(
            build_condition(&sample(20, 40, 5), &cfg),
            Err(DivergenceError::KTooLarge { .. })
        ));
    }
}
