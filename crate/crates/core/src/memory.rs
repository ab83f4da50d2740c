//! Bounded scenario repository and divergence-proportional memory allocation.
//!
//! The repository keeps at most `floor(M / c)` training samples for each of
//! the `c` scenarios seen so far, shrinking old buffers by uniform subsampling
//! as new scenarios arrive. Divergence cases are derived from the stored
//! samples on demand, so one budget covers both uses.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_json, write_json, TrajectorySample};
use crate::{rng, Error, Result};

/// Minimum per-task allocation, so no past constraint disappears.
pub const M_FLOOR: usize = 10;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("repository capacity must be positive")]
    CapacityZero,
    #[error("invalid memory budget: {0}")]
    BadCapacity(String),
    #[error("scenario {0} is not stored in the repository")]
    UnknownScenario(u32),
    #[error("invalid divergence value for scenario {scenario}: {value}")]
    BadDivergence { scenario: u32, value: f64 },
}

impl MemoryError {
    pub fn name(&self) -> &'static str {
        match self {
            MemoryError::CapacityZero => "CapacityZero",
            MemoryError::BadCapacity(_) => "BadCapacity",
            MemoryError::UnknownScenario(_) => "UnknownScenario",
            MemoryError::BadDivergence { .. } => "BadDivergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRepository {
    /// Total sample capacity `M`.
    pub capacity: usize,
    /// Distinct scenarios stored so far.
    pub c: usize,
    pub names: BTreeMap<u32, String>,
    pub buffers: BTreeMap<u32, Vec<TrajectorySample>>,
}

/// `keep` of `items` chosen uniformly without replacement, original order kept.
fn subsample<T: Clone>(items: &[T], keep: usize, rng: &mut rng::Rng) -> Vec<T> {
    if keep >= items.len() {
        return items.to_vec();
    }
    let mut idx = sample_indices(rng, items.len(), keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

impl ScenarioRepository {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(MemoryError::CapacityZero.into());
        }
        Ok(Self {
            capacity,
            c: 0,
            names: BTreeMap::new(),
            buffers: BTreeMap::new(),
        })
    }

    /// `floor(M / c)`, or `M` before the first scenario.
    pub fn per_scenario_cap(&self) -> usize {
        self.capacity / self.c.max(1)
    }

    pub fn total(&self) -> usize {
        self.buffers.values().map(Vec::len).sum()
    }

    pub fn buffer(&self, scenario_id: u32) -> Option<&[TrajectorySample]> {
        self.buffers.get(&scenario_id).map(Vec::as_slice)
    }

    pub fn sizes(&self) -> BTreeMap<u32, usize> {
        self.buffers.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    /// Store a scenario's training data.
    ///
    /// A new id increments `c`; a known id merges into its buffer. Every
    /// buffer is then subsampled to `floor(M / c)`.
    pub fn update(&mut self, scenario_id: u32, name: &str, train: &[TrajectorySample], seed: u64) -> Result<()> {
        if self.capacity == 0 {
            return Err(MemoryError::CapacityZero.into());
        }
        let known = self.buffers.contains_key(&scenario_id);
        if !known {
            self.c += 1;
        }
        let cap = self.per_scenario_cap();
        let round = rng::derive_seed(seed, self.c as u64);
        let mut incoming = subsample(train, cap, &mut rng::stream(round, u64::from(scenario_id) << 1 | 1));
        if known {
            let mut merged = self.buffers.remove(&scenario_id).unwrap_or_default();
            merged.append(&mut incoming);
            incoming = merged;
        }
        self.names.insert(scenario_id, name.to_string());
        self.buffers.insert(scenario_id, incoming);
        for (id, buf) in self.buffers.iter_mut() {
            if buf.len() > cap {
                *buf = subsample(buf, cap, &mut rng::stream(round, u64::from(*id) << 1));
            }
        }
        Ok(())
    }

    /// Persist as `dir/repository.json` plus `dir/scenario_<id>/samples.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = RepositoryManifest {
            capacity: self.capacity,
            c: self.c,
            per_scenario_cap: self.per_scenario_cap(),
            scenarios: self
                .buffers
                .iter()
                .map(|(id, b)| StoredScenario {
                    scenario_id: *id,
                    name: self.names.get(id).cloned().unwrap_or_default(),
                    size: b.len(),
                    path: format!("scenario_{id}/samples.json"),
                })
                .collect(),
        };
        write_json(&dir.join("repository.json"), &manifest)?;
        for (id, buf) in &self.buffers {
            let sub = dir.join(format!("scenario_{id}"));
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            write_json(&sub.join("samples.json"), buf)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: RepositoryManifest = read_json(&dir.join("repository.json"))?;
        let mut repo = Self::new(manifest.capacity)?;
        repo.c = manifest.c;
        for s in manifest.scenarios {
            let buf: Vec<TrajectorySample> = read_json(&dir.join(&s.path))?;
            repo.names.insert(s.scenario_id, s.name);
            repo.buffers.insert(s.scenario_id, buf);
        }
        Ok(repo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredScenario {
    scenario_id: u32,
    name: String,
    size: usize,
    path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RepositoryManifest {
    capacity: usize,
    c: usize,
    per_scenario_cap: usize,
    scenarios: Vec<StoredScenario>,
}

/// Per-past-scenario memory counts for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    /// Scenario index of the current task (1-based count of tasks so far).
    pub c: usize,
    pub m_cl: usize,
    pub m_max: usize,
    pub m_floor: usize,
    pub counts: BTreeMap<u32, usize>,
    /// Weighted divergences the counts were derived from; empty for the
    /// equal plan.
    pub weighted_cklds: BTreeMap<u32, f64>,
    /// True when every divergence was zero and the equal plan was used.
    pub fallback_equal: bool,
}

impl AllocationPlan {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

fn m_max(m_cl: usize, c: usize) -> Result<usize> {
    if c < 2 {
        return Err(MemoryError::BadCapacity(format!("allocation needs c >= 2, got {c}")).into());
    }
    if m_cl == 0 {
        return Err(MemoryError::BadCapacity("M_cl must be positive".into()).into());
    }
    Ok(m_cl / (c - 1))
}

/// Equal allocation `m_max = floor(M_cl / (c − 1))` for every past scenario.
pub fn equal_plan(past: &[u32], m_cl: usize, c: usize) -> Result<AllocationPlan> {
    let m_max = m_max(m_cl, c)?;
    Ok(AllocationPlan {
        c,
        m_cl,
        m_max,
        m_floor: M_FLOOR.min(m_max),
        counts: past.iter().map(|&r| (r, m_max)).collect(),
        weighted_cklds: BTreeMap::new(),
        fallback_equal: false,
    })
}

/// Allocation proportional to divergence:
/// `m_r = round_half_up(m_max · w_r / w_max)`, clipped to `m_max` and floored
/// at `min(M_FLOOR, m_max)`. Every scenario attaining the maximum gets `m_max`.
pub fn allocate(weighted_cklds: &BTreeMap<u32, f64>, m_cl: usize, c: usize) -> Result<AllocationPlan> {
    let m_max = m_max(m_cl, c)?;
    for (&scenario, &value) in weighted_cklds {
        if !(value.is_finite() && value >= 0.0) {
            return Err(MemoryError::BadDivergence { scenario, value }.into());
        }
    }
    let max = weighted_cklds.values().copied().fold(0.0f64, f64::max);
    let past: Vec<u32> = weighted_cklds.keys().copied().collect();
    if max == 0.0 {
        log::warn!("all weighted divergences are zero; falling back to equal allocation");
        let mut plan = equal_plan(&past, m_cl, c)?;
        plan.weighted_cklds = weighted_cklds.clone();
        plan.fallback_equal = true;
        return Ok(plan);
    }
    let m_floor = M_FLOOR.min(m_max);
    let counts = weighted_cklds
        .iter()
        .map(|(&r, &v)| {
            let raw = (m_max as f64 * (v / max) + 0.5).floor() as usize;
            (r, raw.min(m_max).max(m_floor))
        })
        .collect();
    Ok(AllocationPlan {
        c,
        m_cl,
        m_max,
        m_floor,
        counts,
        weighted_cklds: weighted_cklds.clone(),
        fallback_equal: false,
    })
}

/// Draw each planned count uniformly without replacement from its buffer.
/// Counts above the buffer size are clipped with a warning.
pub fn sample_memory(
    repo: &ScenarioRepository,
    plan: &AllocationPlan,
    seed: u64,
) -> Result<BTreeMap<u32, Vec<TrajectorySample>>> {
    let mut out = BTreeMap::new();
    for (&r, &count) in &plan.counts {
        let buf = repo.buffer(r).ok_or(MemoryError::UnknownScenario(r))?;
        if count > buf.len() {
            log::warn!(
                "plan asks {count} samples of scenario {r}, buffer holds {}; clipping",
                buf.len()
            );
        }
        let picked = subsample(buf, count, &mut rng::stream(seed, u64::from(r)));
        out.insert(r, picked);
    }
    Ok(out)
}
