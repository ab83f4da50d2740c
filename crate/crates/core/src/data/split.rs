use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataError, TrajectorySample};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    fn validate(&self) -> Result<(), DataError> {
        let all = [self.train, self.val, self.test];
        let ok = all.iter().all(|r| r.is_finite() && *r >= 0.0)
            && (all.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DataError::BadRatios(all))
        }
    }
}

/// Disjoint index sets covering every sample, each sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDataset {
    pub scenario_id: u32,
    pub name: String,
    pub samples: Vec<TrajectorySample>,
    pub split: Split,
    pub split_seed: u64,
    pub ratios: SplitRatios,
}

impl ScenarioDataset {
    fn pick(&self, idx: &[usize]) -> Vec<&TrajectorySample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn train(&self) -> Vec<&TrajectorySample> {
        self.pick(&self.split.train)
    }

    pub fn val(&self) -> Vec<&TrajectorySample> {
        self.pick(&self.split.val)
    }

    pub fn test(&self) -> Vec<&TrajectorySample> {
        self.pick(&self.split.test)
    }
}

/// Shuffle sample indices with `seed` and cut them by `ratios`.
///
/// Train and validation sizes are rounded to the nearest sample; the test
/// split takes the remainder.
pub fn split_dataset(
    scenario_id: u32,
    name: impl Into<String>,
    samples: Vec<TrajectorySample>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<ScenarioDataset, DataError> {
    ratios.validate()?;
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 0x51717));
    let n_train = ((ratios.train * n as f64).round() as usize).min(n);
    let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(ScenarioDataset {
        scenario_id,
        name: name.into(),
        samples,
        split: Split { train, val, test },
        split_seed: seed,
        ratios,
    })
}
