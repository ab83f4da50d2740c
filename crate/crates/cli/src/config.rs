//! Flat run configuration. A JSON file supplies the base values, command-line
//! flags override single keys, and the merged document is validated before
//! any work starts.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use traffic_cl::data::{
    load_dataset, generate_synthetic, ScenarioDataset, ScenarioFamily, SplitRatios, SyntheticScenarioSpec,
    WindowConfig,
};
use traffic_cl::divergence::{ConditionConfig, DivergenceConfig, MdnConfig};
use traffic_cl::predictor::PredictorConfig;
use traffic_cl::trainer::{ContinualConfig, DivergenceOverride, Mode, TrainerConfig};

use crate::CliError;

/// A scenario in the training sequence: a dataset directory written by
/// `ingest` or `synth`, or a synthetic scene generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    Path(PathBuf),
    Synthetic(SyntheticSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub family: ScenarioFamily,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub scenario_id: Option<u32>,
    #[serde(default)]
    pub n_vehicles: Option<usize>,
    #[serde(default)]
    pub speed_range: Option<[f64; 2]>,
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenarios: Vec<ScenarioSource>,
    pub mode: Mode,
    /// Repository capacity `M`.
    pub memory_capacity: usize,
    /// Memory budget `M_cl` shared by past tasks.
    pub memory_cl: usize,
    pub fixed_per_task_memory: Option<usize>,
    pub divergence_overrides: Vec<DivergenceOverride>,
    pub w1: f64,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub full_memory_batches: bool,
    pub eps_feas: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub frame_rate: f64,
    pub t_h: f64,
    pub t_f: f64,
    /// Neighbor slots `N`.
    pub n_max: usize,
    pub stride: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub normalize: bool,
    /// Laplacian eigenvectors `k`.
    pub spectral_k: usize,
    pub lambda_decay: f64,
    pub downsample: usize,
    /// Mixture components `K`.
    pub mdn_k: usize,
    pub mdn_hidden: usize,
    pub mdn_epochs: usize,
    pub mdn_lr: f64,
    pub mdn_batch_size: usize,
    pub variance_floor: f64,
    pub min_cases_per_component: usize,
    pub n_mc: usize,
    pub max_conditions: usize,
    pub split_seed: u64,
    pub init_seed: u64,
    pub trainer_seed: u64,
    pub memory_seed: u64,
    pub divergence_seed: u64,
    pub mdn_seed: u64,
    pub save_repository: bool,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cl = ContinualConfig::default();
        let t = TrainerConfig::default();
        let w = WindowConfig::default();
        let r = SplitRatios::default();
        let d = DivergenceConfig::default();
        Self {
            scenarios: Vec::new(),
            mode: cl.mode,
            memory_capacity: cl.memory_capacity,
            memory_cl: cl.memory_cl,
            fixed_per_task_memory: None,
            divergence_overrides: Vec::new(),
            w1: d.w1,
            gamma: t.gamma,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            full_memory_batches: t.full_memory_batches,
            eps_feas: t.eps_feas,
            qp_tol: t.qp_tol,
            qp_max_iter: t.qp_max_iter,
            frame_rate: w.frame_rate,
            t_h: w.t_h,
            t_f: w.t_f,
            n_max: w.n_max,
            stride: w.stride,
            train_ratio: r.train,
            val_ratio: r.val,
            test_ratio: r.test,
            normalize: true,
            spectral_k: d.condition.k,
            lambda_decay: d.condition.lambda_decay,
            downsample: d.condition.downsample,
            mdn_k: d.mdn.k,
            mdn_hidden: d.mdn.hidden,
            mdn_epochs: d.mdn.epochs,
            mdn_lr: d.mdn.lr,
            mdn_batch_size: d.mdn.batch_size,
            variance_floor: d.mdn.variance_floor,
            min_cases_per_component: d.mdn.min_cases_per_component,
            n_mc: d.n_mc,
            max_conditions: d.max_conditions,
            split_seed: 0,
            init_seed: cl.init_seed,
            trainer_seed: t.seed,
            memory_seed: cl.memory_seed,
            divergence_seed: d.seed,
            mdn_seed: d.mdn.seed,
            save_repository: false,
            output: None,
        }
    }
}

/// Command-line overrides; each flag replaces the config key of the same
/// name.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct ConfigFlags {
    /// Base configuration file (flat JSON).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Scenario dataset directory; repeat for a sequence. Replaces the
    /// configured sequence.
    #[arg(long = "scenario")]
    #[serde(skip)]
    pub scenario: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_capacity: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_cl: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_per_task_memory: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_memory_batches: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_feas: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qp_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qp_max_iter: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_h: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_f: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ratio: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_ratio: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectral_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub downsample: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mdn_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mdn_hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mdn_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mdn_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mdn_batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_floor: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_cases_per_component: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_mc: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_conditions: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trainer_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mdn_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub save_repository: Option<bool>,
    /// Output directory.
    #[arg(long = "out")]
    #[serde(rename = "output", skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ConfigFlags {
    /// Merge file values, then flags, into a validated [`RunConfig`].
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(CliError::Config(format!("{}: expected a JSON object", path.display()))),
                    Err(e) => return Err(CliError::Config(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        let Value::Object(flags) = serde_json::to_value(self).expect("flags serialize") else {
            unreachable!("flags are a struct")
        };
        doc.extend(flags);
        if !self.scenario.is_empty() {
            doc.insert("scenarios".into(), serde_json::to_value(&self.scenario).expect("paths serialize"));
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(doc)).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            t_h: self.t_h,
            t_f: self.t_f,
            frame_rate: self.frame_rate,
            n_max: self.n_max,
            stride: self.stride,
        }
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios::new(self.train_ratio, self.val_ratio, self.test_ratio)
    }

    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            normalize: self.normalize,
            ..PredictorConfig::from_window(&self.window())
        }
    }

    pub fn divergence(&self) -> DivergenceConfig {
        DivergenceConfig {
            condition: ConditionConfig {
                k: self.spectral_k,
                lambda_decay: self.lambda_decay,
                downsample: self.downsample,
            },
            mdn: MdnConfig {
                k: self.mdn_k,
                hidden: self.mdn_hidden,
                epochs: self.mdn_epochs,
                lr: self.mdn_lr,
                batch_size: self.mdn_batch_size,
                variance_floor: self.variance_floor,
                min_cases_per_component: self.min_cases_per_component,
                seed: self.mdn_seed,
            },
            n_mc: self.n_mc,
            max_conditions: self.max_conditions,
            w1: self.w1,
            seed: self.divergence_seed,
        }
    }

    pub fn continual(&self) -> ContinualConfig {
        ContinualConfig {
            mode: self.mode,
            memory_capacity: self.memory_capacity,
            memory_cl: self.memory_cl,
            fixed_per_task_memory: self.fixed_per_task_memory,
            divergence_overrides: self.divergence_overrides.clone(),
            trainer: TrainerConfig {
                lr: self.lr,
                epochs: self.epochs,
                batch_size: self.batch_size,
                gamma: self.gamma,
                eps_feas: self.eps_feas,
                qp_tol: self.qp_tol,
                qp_max_iter: self.qp_max_iter,
                clip_norm: self.clip_norm,
                full_memory_batches: self.full_memory_batches,
                seed: self.trainer_seed,
            },
            divergence: self.divergence(),
            init_seed: self.init_seed,
            memory_seed: self.memory_seed,
            save_repository: self.save_repository,
        }
    }

    /// Check every value against the preconditions of the module that will
    /// consume it.
    pub fn validate(&self) -> Result<(), CliError> {
        self.window().validate().map_err(traffic_cl::Error::from)?;
        let r = [self.train_ratio, self.val_ratio, self.test_ratio];
        if !(r.iter().all(|x| x.is_finite() && *x >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9) {
            return Err(traffic_cl::data::DataError::BadRatios(r).into());
        }
        if self.mdn_k == 0 || self.mdn_hidden == 0 || self.mdn_epochs == 0 || self.mdn_batch_size == 0 {
            return Err(CliError::Config("mdn_k, mdn_hidden, mdn_epochs and mdn_batch_size must be positive".into()));
        }
        if !(self.mdn_lr.is_finite() && self.mdn_lr > 0.0 && self.variance_floor.is_finite() && self.variance_floor > 0.0) {
            return Err(CliError::Config("mdn_lr and variance_floor must be positive".into()));
        }
        self.continual().validate()?;
        Ok(())
    }

    /// Load or generate every scenario of the sequence. Scenario ids must
    /// name one dataset each; repeating a source revisits it.
    pub fn load_scenarios(&self) -> Result<Vec<ScenarioDataset>, CliError> {
        if self.scenarios.is_empty() {
            return Err(CliError::Config("no scenarios configured".into()));
        }
        let window = self.window();
        let mut out: Vec<ScenarioDataset> = Vec::with_capacity(self.scenarios.len());
        for (i, src) in self.scenarios.iter().enumerate() {
            let data = match src {
                ScenarioSource::Path(p) => load_checked(p, &window)?,
                ScenarioSource::Synthetic(s) => generate_synthetic(&self.synthetic_spec(s, i as u32))
                    .map_err(|e| CliError::context(format!("synthetic scenario {i}"), e))?,
            };
            if let Some(prev) = out.iter().find(|d| d.scenario_id == data.scenario_id) {
                if prev.name != data.name || prev.samples.len() != data.samples.len() {
                    return Err(CliError::Config(format!(
                        "scenario id {} is used by both `{}` and `{}`",
                        data.scenario_id, prev.name, data.name
                    )));
                }
            }
            out.push(data);
        }
        Ok(out)
    }

    pub fn synthetic_spec(&self, s: &SyntheticSource, default_id: u32) -> SyntheticScenarioSpec {
        let base = SyntheticScenarioSpec::new(s.family, s.scenario_id.unwrap_or(default_id), s.seed);
        SyntheticScenarioSpec {
            name: s.name.clone().unwrap_or(base.name.clone()),
            n_vehicles: s.n_vehicles.unwrap_or(base.n_vehicles),
            speed_range: s.speed_range.unwrap_or(base.speed_range),
            noise_std: s.noise_std.unwrap_or(base.noise_std),
            duration_s: s.duration_s.unwrap_or(base.duration_s),
            window: self.window(),
            ratios: self.ratios(),
            split_seed: self.split_seed,
            ..base
        }
    }
}

/// Load a dataset directory and make sure its windows fit the configured
/// predictor.
pub fn load_checked(path: &Path, window: &WindowConfig) -> Result<ScenarioDataset, CliError> {
    let (data, manifest) = load_dataset(path).map_err(|e| CliError::context(path.display(), e))?;
    let w = &manifest.window;
    if w.history_frames() != window.history_frames()
        || w.future_frames() != window.future_frames()
        || w.n_max != window.n_max
    {
        return Err(CliError::Config(format!(
            "{}: dataset windows ({} history, {} future frames, {} neighbors) do not match the configuration ({}, {}, {})",
            path.display(),
            w.history_frames(),
            w.future_frames(),
            w.n_max,
            window.history_frames(),
            window.future_frames(),
            window.n_max
        )));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let flags = ConfigFlags {
            config: Some(write(dir.path(), r#"{"lr": 0.5, "epochs": 3, "mode": "gsm"}"#)),
            epochs: Some(7),
            ..ConfigFlags::default()
        };
        let cfg = flags.resolve().unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.mode, Mode::Gsm);
        assert_eq!(cfg.memory_cl, 3500);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let flags = ConfigFlags {
            config: Some(write(dir.path(), r#"{"learning_rate": 0.5}"#)),
            ..ConfigFlags::default()
        };
        let err = flags.resolve().unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn invalid_values_fail_before_work() {
        let bad = [
            ConfigFlags { lr: Some(-1.0), ..ConfigFlags::default() },
            ConfigFlags { w1: Some(1.5), ..ConfigFlags::default() },
            ConfigFlags { train_ratio: Some(0.9), ..ConfigFlags::default() },
            ConfigFlags { lambda_decay: Some(0.0), ..ConfigFlags::default() },
            ConfigFlags { t_h: Some(0.0), ..ConfigFlags::default() },
            ConfigFlags { mode: Some("replay".into()), ..ConfigFlags::default() },
        ];
        for flags in bad {
            assert!(flags.resolve().is_err(), "{flags:?}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ConfigFlags::default().resolve().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.continual(), ContinualConfig::default());
    }

    #[test]
    fn scenario_sources_parse_both_forms() {
        let v: Vec<ScenarioSource> =
            serde_json::from_str(r#"["data/a", {"family": "merge", "seed": 3, "n_vehicles": 5}]"#).unwrap();
        assert_eq!(v[0], ScenarioSource::Path("data/a".into()));
        let ScenarioSource::Synthetic(s) = &v[1] else { panic!() };
        assert_eq!(s.family, ScenarioFamily::Merge);
        assert_eq!(s.n_vehicles, Some(5));
    }
}
