//! Outer loop over a scenario sequence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::{train_scenario, write_history_csv, TaskLossSet};
use super::{TrainerConfig, TrainerError};
use crate::data::{read_json, write_json, ScenarioDataset, TrajectorySample};
use crate::divergence::{cases_from_samples, measure_divergence, DivergenceConfig, DivergenceReport, ScenarioCases};
use crate::memory::{allocate, equal_plan, sample_memory, AllocationPlan, ScenarioRepository};
use crate::metrics::{evaluate, forgetting, EvalReport, ForgettingReport};
use crate::predictor::{Checkpoint, Predictor};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Sequential fine-tuning without memory.
    Vanilla,
    /// Gradient projection with equal per-task memory.
    Gsm,
    /// Gradient projection with divergence-proportional memory.
    Dgsm,
    /// All training data at once.
    Joint,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Gsm => "gsm",
            Mode::Dgsm => "dgsm",
            Mode::Joint => "joint",
        }
    }

    fn uses_memory(&self) -> bool {
        matches!(self, Mode::Gsm | Mode::Dgsm)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "gsm" => Ok(Mode::Gsm),
            "dgsm" => Ok(Mode::Dgsm),
            "joint" => Ok(Mode::Joint),
            other => Err(format!("unknown mode `{other}` (expected vanilla, gsm, dgsm or joint)")),
        }
    }
}

/// Fixed weighted divergence between a current and a past scenario, used in
/// place of a measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceOverride {
    pub current: u32,
    pub past: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualConfig {
    pub mode: Mode,
    /// Repository capacity `M`.
    pub memory_capacity: usize,
    /// Memory budget for constraints `M_cl`.
    pub memory_cl: usize,
    /// Give every past task exactly this many samples instead of a planned
    /// allocation.
    pub fixed_per_task_memory: Option<usize>,
    pub divergence_overrides: Vec<DivergenceOverride>,
    pub trainer: TrainerConfig,
    pub divergence: DivergenceConfig,
    pub init_seed: u64,
    pub memory_seed: u64,
    /// Also write the final repository contents into the run directory.
    pub save_repository: bool,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dgsm,
            memory_capacity: 9000,
            memory_cl: 3500,
            fixed_per_task_memory: None,
            divergence_overrides: Vec::new(),
            trainer: TrainerConfig::default(),
            divergence: DivergenceConfig::default(),
            init_seed: 0,
            memory_seed: 0,
            save_repository: false,
        }
    }
}

impl ContinualConfig {
    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.divergence.validate()?;
        if self.memory_capacity == 0 {
            return Err(crate::memory::MemoryError::CapacityZero.into());
        }
        if self.memory_cl == 0 || self.memory_cl > self.memory_capacity {
            return Err(crate::memory::MemoryError::BadCapacity(format!(
                "M_cl = {} must lie in 1..=M = {}",
                self.memory_cl, self.memory_capacity
            ))
            .into());
        }
        Ok(())
    }

    fn override_for(&self, current: u32, past: u32) -> Option<f64> {
        self.divergence_overrides
            .iter()
            .find(|o| o.current == current && o.past == past)
            .map(|o| o.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub name: String,
    /// Scenarios whose training data this phase used.
    pub scenario_ids: Vec<u32>,
    /// Distinct scenarios learned so far.
    pub c: usize,
    pub plan: Option<AllocationPlan>,
    pub weighted_cklds: BTreeMap<u32, f64>,
    pub task_losses: TaskLossSet,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub projections: usize,
    pub sample_gradients: usize,
    pub allocated_memory: usize,
    pub repository_sizes: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub mode: Mode,
    pub config: ContinualConfig,
    pub phases: Vec<PhaseSummary>,
    pub evals: Vec<EvalReport>,
    pub forgetting: Option<ForgettingReport>,
    /// Memory samples allocated to constraints, summed over phases.
    pub allocated_memory: usize,
    /// Sample-gradient evaluations, summed over phases; the cost measure.
    pub sample_gradients: usize,
    #[serde(skip)]
    pub theta: Vec<f64>,
}

impl RunArtifacts {
    pub fn final_eval(&self) -> &EvalReport {
        self.evals.last().expect("a run has at least one evaluation")
    }
}

fn phase_dir(out: &Path, phase: usize, name: &str) -> std::path::PathBuf {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    out.join(format!("phase_{phase:02}_{clean}"))
}

/// Weighted divergences between `current` and each past scenario, from
/// overrides where configured and otherwise measured on repository contents.
fn phase_divergences(
    repo: &ScenarioRepository,
    current: u32,
    past: &[u32],
    cfg: &ContinualConfig,
) -> Result<(BTreeMap<u32, f64>, Option<DivergenceReport>)> {
    let mut out: BTreeMap<u32, f64> = past
        .iter()
        .filter_map(|&r| cfg.override_for(current, r).map(|v| (r, v)))
        .collect();
    if out.len() == past.len() {
        return Ok((out, None));
    }
    let ids: Vec<u32> = std::iter::once(current).chain(past.iter().copied()).collect();
    let scenarios = ids
        .iter()
        .map(|&id| {
            let buf: Vec<&TrajectorySample> = repo.buffer(id).unwrap_or_default().iter().collect();
            Ok(ScenarioCases {
                name: repo.names.get(&id).cloned().unwrap_or_default(),
                scenario_id: id,
                cases: cases_from_samples(&buf, &cfg.divergence.condition)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (report, _) = measure_divergence(&scenarios, &cfg.divergence)?;
    for (j, &r) in past.iter().enumerate() {
        out.entry(r).or_insert(report.weighted[0][j + 1]);
    }
    Ok((out, Some(report)))
}

/// Train a predictor through `scenarios` in order.
///
/// After every phase the model is evaluated on the test split of every
/// scenario learned so far. When `out_dir` is given, each phase writes its
/// checkpoint, step log, evaluation, allocation plan and divergence report
/// into its own subdirectory, and `run.json` summarises the run.
pub fn run_continual(
    predictor: &Predictor,
    scenarios: &[ScenarioDataset],
    cfg: &ContinualConfig,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(TrainerError::EmptySequence.into());
    }
    if let Some(out) = out_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let mut theta = predictor.init_params(cfg.init_seed);
    let mut phases = Vec::new();
    let mut evals = Vec::new();
    let mut repo = ScenarioRepository::new(cfg.memory_capacity)?;

    if cfg.mode == Mode::Joint {
        let train: Vec<&TrajectorySample> = scenarios.iter().flat_map(|s| s.train()).collect();
        let seed = rng::derive_seed(cfg.trainer.seed, 0);
        let (t, hist) = train_scenario(predictor, theta, &train, &BTreeMap::new(), &cfg.trainer, seed)?;
        theta = t;
        let mut learned: Vec<&ScenarioDataset> = Vec::new();
        for s in scenarios {
            if !learned.iter().any(|l| l.scenario_id == s.scenario_id) {
                learned.push(s);
            }
        }
        let report = evaluate(predictor, &theta, &learned, cfg.mode.as_str(), "phase_00", None)?;
        let summary = PhaseSummary {
            phase: 0,
            name: "joint".into(),
            scenario_ids: learned.iter().map(|s| s.scenario_id).collect(),
            c: learned.len(),
            plan: None,
            weighted_cklds: BTreeMap::new(),
            task_losses: hist.task_losses.clone(),
            epoch_losses: hist.epoch_losses.clone(),
            steps: hist.steps.len(),
            projections: 0,
            sample_gradients: hist.sample_gradients(),
            allocated_memory: 0,
            repository_sizes: BTreeMap::new(),
        };
        if let Some(out) = out_dir {
            persist_phase(out, &summary, predictor, &theta, &hist, &report, None)?;
        }
        phases.push(summary);
        evals.push(report);
        return finish(cfg, phases, evals, None, theta, out_dir, &repo);
    }

    let mut learned: Vec<&ScenarioDataset> = Vec::new();
    for (phase, scenario) in scenarios.iter().enumerate() {
        let id = scenario.scenario_id;
        let train = scenario.train();
        if !learned.iter().any(|l| l.scenario_id == id) {
            learned.push(scenario);
        }
        if cfg.mode.uses_memory() {
            let owned: Vec<TrajectorySample> = train.iter().map(|s| (*s).clone()).collect();
            repo.update(id, &scenario.name, &owned, cfg.memory_seed)?;
        }
        let c = learned.len();
        let past: Vec<u32> = learned.iter().map(|l| l.scenario_id).filter(|&r| r != id).collect();
        let mut weighted = BTreeMap::new();
        let mut divergence = None;
        let plan = if cfg.mode.uses_memory() && !past.is_empty() {
            Some(match cfg.fixed_per_task_memory {
                Some(m) => AllocationPlan {
                    c,
                    m_cl: m * past.len(),
                    m_max: m,
                    m_floor: 0,
                    counts: past.iter().map(|&r| (r, m)).collect(),
                    weighted_cklds: BTreeMap::new(),
                    fallback_equal: false,
                },
                None if cfg.mode == Mode::Gsm => equal_plan(&past, cfg.memory_cl, c)?,
                None => {
                    let (w, report) = phase_divergences(&repo, id, &past, cfg)?;
                    weighted = w;
                    divergence = report;
                    allocate(&weighted, cfg.memory_cl, c)?
                }
            })
        } else {
            None
        };
        let memory = match &plan {
            Some(p) => sample_memory(&repo, p, rng::derive_seed(cfg.memory_seed, phase as u64))?,
            None => BTreeMap::new(),
        };
        let pools: BTreeMap<u32, Vec<&TrajectorySample>> = memory
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(r, v)| (*r, v.iter().collect()))
            .collect();
        let seed = rng::derive_seed(cfg.trainer.seed, phase as u64);
        let (t, hist) = train_scenario(predictor, theta, &train, &pools, &cfg.trainer, seed)?;
        theta = t;
        let checkpoint = phase_dir(Path::new(""), phase, &scenario.name).display().to_string();
        let report = evaluate(predictor, &theta, &learned, cfg.mode.as_str(), &checkpoint, Some(id))?;
        let summary = PhaseSummary {
            phase,
            name: scenario.name.clone(),
            scenario_ids: vec![id],
            c,
            allocated_memory: plan.as_ref().map_or(0, AllocationPlan::total),
            plan,
            weighted_cklds: weighted,
            task_losses: hist.task_losses.clone(),
            epoch_losses: hist.epoch_losses.clone(),
            steps: hist.steps.len(),
            projections: hist.projections(),
            sample_gradients: hist.sample_gradients(),
            repository_sizes: repo.sizes(),
        };
        log::info!(
            "phase {phase} ({}): average ADE {:.4}, {} projections",
            scenario.name,
            report.average_ade,
            summary.projections
        );
        if let Some(out) = out_dir {
            persist_phase(out, &summary, predictor, &theta, &hist, &report, divergence.as_ref())?;
        }
        phases.push(summary);
        evals.push(report);
    }
    let forgetting = Some(forgetting(&evals)?);
    finish(cfg, phases, evals, forgetting, theta, out_dir, &repo)
}

fn persist_phase(
    out: &Path,
    summary: &PhaseSummary,
    predictor: &Predictor,
    theta: &[f64],
    hist: &super::TrainingHistory,
    report: &EvalReport,
    divergence: Option<&DivergenceReport>,
) -> Result<()> {
    let dir = phase_dir(out, summary.phase, &summary.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Checkpoint::new(predictor, theta).save(dir.join("checkpoint.json"))?;
    let path = dir.join("history.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_history_csv(std::io::BufWriter::new(file), hist)?;
    write_json(&dir.join("eval.json"), report)?;
    write_json(&dir.join("phase.json"), summary)?;
    if let Some(plan) = &summary.plan {
        write_json(&dir.join("plan.json"), plan)?;
    }
    if let Some(d) = divergence {
        write_json(&dir.join("divergence.json"), d)?;
    }
    Ok(())
}

fn finish(
    cfg: &ContinualConfig,
    phases: Vec<PhaseSummary>,
    evals: Vec<EvalReport>,
    forgetting: Option<ForgettingReport>,
    theta: Vec<f64>,
    out_dir: Option<&Path>,
    repo: &ScenarioRepository,
) -> Result<RunArtifacts> {
    let artifacts = RunArtifacts {
        mode: cfg.mode,
        config: cfg.clone(),
        allocated_memory: phases.iter().map(|p| p.allocated_memory).sum(),
        sample_gradients: phases.iter().map(|p| p.sample_gradients).sum(),
        phases,
        evals,
        forgetting,
        theta,
    };
    if let Some(out) = out_dir {
        write_json(&out.join("run.json"), &artifacts)?;
        if cfg.save_repository && repo.c > 0 {
            repo.save(out.join("repository"))?;
        }
    }
    Ok(artifacts)
}

/// Allocation plans stored in a run directory, in phase order.
pub fn load_plans(run_dir: impl AsRef<Path>) -> Result<Vec<AllocationPlan>> {
    let run: RunArtifacts = read_json(&run_dir.as_ref().join("run.json"))?;
    Ok(run.phases.into_iter().filter_map(|p| p.plan).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ScenarioFamily, SplitRatios, SyntheticScenarioSpec, WindowConfig};
    use crate::divergence::MdnConfig;
    use crate::predictor::PredictorConfig;

    fn tiny_window() -> WindowConfig {
        WindowConfig {
            t_h: 1.0,
            t_f: 1.0,
            frame_rate: 5.0,
            n_max: 2,
            stride: 10,
        }
    }

    fn scenario(family: ScenarioFamily, id: u32) -> ScenarioDataset {
        let mut spec = SyntheticScenarioSpec::new(family, id, 100 + u64::from(id));
        spec.n_vehicles = 12;
        spec.duration_s = 30.0;
        spec.window = tiny_window();
        spec.ratios = SplitRatios::new(0.6, 0.1, 0.3);
        generate_synthetic(&spec).unwrap()
    }

    fn predictor() -> Predictor {
        let mut pc = PredictorConfig::from_window(&tiny_window());
        pc.encoder_width = 8;
        pc.hidden_width = 8;
        Predictor::new(pc)
    }

    fn cfg(mode: Mode) -> ContinualConfig {
        ContinualConfig {
            mode,
            memory_capacity: 300,
            memory_cl: 60,
            trainer: TrainerConfig {
                lr: 0.01,
                epochs: 2,
                batch_size: 16,
                ..TrainerConfig::default()
            },
            divergence: DivergenceConfig {
                mdn: MdnConfig {
                    k: 1,
                    hidden: 4,
                    epochs: 2,
                    min_cases_per_component: 10,
                    ..MdnConfig::default()
                },
                condition: crate::divergence::ConditionConfig {
                    k: 2,
                    downsample: 1,
                    ..Default::default()
                },
                n_mc: 5,
                ..DivergenceConfig::default()
            },
            ..ContinualConfig::default()
        }
    }

    #[test]
    fn modes_agree_on_a_single_scenario() {
        let s = vec![scenario(ScenarioFamily::StraightFlow, 0)];
        let p = predictor();
        let ades: Vec<f64> = [Mode::Vanilla, Mode::Gsm, Mode::Dgsm, Mode::Joint]
            .iter()
            .map(|&m| run_continual(&p, &s, &cfg(m), None).unwrap().final_eval().average_ade)
            .collect();
        assert!(ades.windows(2).all(|w| w[0] == w[1]), "{ades:?}");
    }

    #[test]
    fn equal_divergences_reproduce_gsm() {
        let s = vec![
            scenario(ScenarioFamily::StraightFlow, 0),
            scenario(ScenarioFamily::Merge, 1),
            scenario(ScenarioFamily::Roundabout, 2),
        ];
        let p = predictor();
        let mut d = cfg(Mode::Dgsm);
        for (cur, past) in [(1, 0), (2, 0), (2, 1)] {
            d.divergence_overrides.push(DivergenceOverride { current: cur, past, value: 4.0 });
        }
        let a = run_continual(&p, &s, &d, None).unwrap();
        let b = run_continual(&p, &s, &cfg(Mode::Gsm), None).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.allocated_memory, b.allocated_memory);
    }

    #[test]
    fn unequal_divergences_use_less_memory() {
        let s = vec![
            scenario(ScenarioFamily::StraightFlow, 0),
            scenario(ScenarioFamily::Merge, 1),
            scenario(ScenarioFamily::Roundabout, 2),
        ];
        let p = predictor();
        let mut d = cfg(Mode::Dgsm);
        for (cur, past, v) in [(1, 0, 3.0), (2, 0, 1.0), (2, 1, 5.0)] {
            d.divergence_overrides.push(DivergenceOverride { current: cur, past, value: v });
        }
        let a = run_continual(&p, &s, &d, None).unwrap();
        let b = run_continual(&p, &s, &cfg(Mode::Gsm), None).unwrap();
        assert!(a.allocated_memory < b.allocated_memory);
        assert!(a.sample_gradients <= b.sample_gradients);
    }

    #[test]
    fn measured_run_writes_artifacts_and_is_reproducible() {
        let s = vec![scenario(ScenarioFamily::StraightFlow, 0), scenario(ScenarioFamily::Roundabout, 1)];
        let p = predictor();
        let dir = tempfile::tempdir().unwrap();
        let a = run_continual(&p, &s, &cfg(Mode::Dgsm), Some(dir.path())).unwrap();
        assert_eq!(a.evals.len(), 2);
        assert_eq!(a.evals[1].scenarios.len(), 2);
        assert!(a.phases[1].weighted_cklds.contains_key(&0));
        let phase1 = phase_dir(dir.path(), 1, "roundabout");
        for f in ["checkpoint.json", "history.csv", "eval.json", "plan.json", "divergence.json"] {
            assert!(phase1.join(f).exists(), "{f}");
        }
        assert_eq!(load_plans(dir.path()).unwrap().len(), 1);
        let first = fs::read(dir.path().join("run.json")).unwrap();
        let other = tempfile::tempdir().unwrap();
        run_continual(&p, &s, &cfg(Mode::Dgsm), Some(other.path())).unwrap();
        assert_eq!(first, fs::read(other.path().join("run.json")).unwrap());
        assert!(a.forgetting.unwrap().get(0).is_some());
    }

    #[test]
    fn joint_trains_once() {
        let s = vec![scenario(ScenarioFamily::StraightFlow, 0), scenario(ScenarioFamily::Merge, 1)];
        let a = run_continual(&predictor(), &s, &cfg(Mode::Joint), None).unwrap();
        assert_eq!(a.phases.len(), 1);
        assert_eq!(a.evals.len(), 1);
        assert_eq!(a.final_eval().scenarios.len(), 2);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(matches!(
            run_continual(&predictor(), &[], &cfg(Mode::Gsm), None),
            Err(Error::Trainer(TrainerError::EmptySequence))
        ));
    }
}
