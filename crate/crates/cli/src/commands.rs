use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use serde_json::json;

use traffic_cl::data::{
    build_samples, generate_tracks, parse_tracks_path, save_dataset, split_dataset, write_tracks_csv,
    DatasetManifest, ScenarioDataset, ScenarioFamily, Track,
};
use traffic_cl::divergence::{cases_from_samples, measure_divergence as measure, ScenarioCases};
use traffic_cl::metrics::{evaluate as eval_report, interaction_density, TtcpConfig};
use traffic_cl::predictor::{Checkpoint, Predictor};
use traffic_cl::trainer::run_continual;

use crate::config::{ConfigFlags, RunConfig, SyntheticSource};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifacts serialize");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::Config("an output directory is required (--out or `output`)".into()))?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    Ok(out)
}

/// Persist a windowed dataset with its manifest, the interaction summary of
/// its tracks and the resolved configuration.
fn persist_dataset(
    out: &Path,
    cfg: &RunConfig,
    data: &ScenarioDataset,
    tracks: &[Track],
    skipped: usize,
    rejected: usize,
    source: serde_json::Value,
) -> Result<(), CliError> {
    let window = cfg.window();
    let manifest = DatasetManifest::new(data, &window, tracks.len(), skipped, rejected, source);
    save_dataset(out, &manifest, &data.samples).map_err(|e| CliError::context(out.display(), e))?;
    write_json(&out.join("interaction.json"), &interaction_density(tracks, &TtcpConfig::default()))?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let c = &manifest.counts;
    println!(
        "{}: {} tracks, {} samples (train {}, val {}, test {}), {} windows skipped, {} rows rejected",
        data.name, c.tracks, c.samples, c.train, c.val, c.test, c.skipped_windows, c.rejected_rows
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Trajectory CSV with track_id, frame_id, timestamp_ms, agent_type, x, y.
    #[arg(long)]
    pub csv: PathBuf,
    /// Scenario name; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub scenario_id: u32,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

pub fn ingest(a: &IngestArgs) -> Result<(), CliError> {
    let cfg = a.flags.resolve()?;
    let window = cfg.window();
    let ctx = |e: traffic_cl::Error| CliError::context(a.csv.display(), e);
    let parsed = parse_tracks_path(&a.csv, window.frame_rate).map_err(ctx)?;
    let (samples, stats) = build_samples(&parsed.tracks, &window, a.scenario_id).map_err(ctx)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.csv
            .file_stem()
            .map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
    });
    let data = split_dataset(a.scenario_id, name, samples, cfg.ratios(), cfg.split_seed)?;
    let out = output_dir(&cfg)?;
    let source = json!({ "csv": a.csv });
    persist_dataset(&out, &cfg, &data, &parsed.tracks, stats.skipped, parsed.rejected_rows, source)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub family: ScenarioFamily,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub scenario_id: u32,
    #[arg(long)]
    pub n_vehicles: Option<usize>,
    /// Scene seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    /// Also write the raw tracks as CSV in the ingestion schema.
    #[arg(long)]
    pub tracks_csv: bool,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = a.flags.resolve()?;
    let src = SyntheticSource {
        family: a.family,
        name: a.name.clone(),
        scenario_id: Some(a.scenario_id),
        n_vehicles: a.n_vehicles,
        speed_range: None,
        noise_std: a.noise_std,
        duration_s: a.duration_s,
        seed: a.seed,
    };
    let spec = cfg.synthetic_spec(&src, a.scenario_id);
    let tracks = generate_tracks(&spec)?;
    let (samples, stats) = build_samples(&tracks, &spec.window, spec.scenario_id)?;
    let data = split_dataset(spec.scenario_id, spec.name.clone(), samples, spec.ratios, spec.split_seed)?;
    let out = output_dir(&cfg)?;
    if a.tracks_csv {
        let path = out.join("tracks.csv");
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        write_tracks_csv(std::io::BufWriter::new(file), &tracks)?;
    }
    let source = serde_json::to_value(&spec).expect("spec serializes");
    persist_dataset(&out, &cfg, &data, &tracks, stats.skipped, 0, json!({ "synthetic": source }))
}

#[derive(Debug, Args)]
pub struct DivergenceArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
}

pub fn measure_divergence(a: &DivergenceArgs) -> Result<(), CliError> {
    let cfg = a.flags.resolve()?;
    let mut scenarios = cfg.load_scenarios()?;
    let mut seen = std::collections::BTreeSet::new();
    scenarios.retain(|s| seen.insert(s.scenario_id));
    if scenarios.len() < 2 {
        return Err(CliError::Config("divergence needs at least two distinct scenarios".into()));
    }
    let dcfg = cfg.divergence();
    let cases = scenarios
        .iter()
        .map(|s| {
            Ok(ScenarioCases {
                name: s.name.clone(),
                scenario_id: s.scenario_id,
                cases: cases_from_samples(&s.train(), &dcfg.condition).map_err(|e| CliError::context(&s.name, e))?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let (report, _) = measure(&cases, &dcfg).map_err(|e| CliError::context("divergence", e))?;
    let out = output_dir(&cfg)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    write_json(&out.join("divergence.json"), &report)?;
    println!("weighted divergence (row = current scenario, w1 = {}):", report.w1);
    for (i, row) in report.weighted.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&report.noise_bound[i])
            .map(|(v, nb)| format!("{v:>10.3} ±{nb:<8.3}"))
            .collect();
        println!("{:>20} {}", report.scenarios[i], cells.join(" "));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = a.flags.resolve()?;
    let scenarios = cfg.load_scenarios()?;
    let out = output_dir(&cfg)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let predictor = Predictor::new(cfg.predictor());
    let run = run_continual(&predictor, &scenarios, &cfg.continual(), Some(&out))?;
    for (phase, eval) in run.phases.iter().zip(&run.evals) {
        println!(
            "phase {} ({}): average ADE {:.4}, FDE {:.4}, memory {}, projections {}",
            phase.phase, phase.name, eval.average_ade, eval.average_fde, phase.allocated_memory, phase.projections
        );
    }
    let last = run.final_eval();
    println!("final [{}]: average ADE {:.4}, FDE {:.4}", run.mode, last.average_ade, last.average_fde);
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = a.flags.resolve()?;
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| CliError::context(a.checkpoint.display(), e))?;
    let pc = &ck.predictor.config;
    let window = cfg.window();
    if (pc.history_frames, pc.future_frames, pc.n_max) != (window.history_frames(), window.future_frames(), window.n_max)
    {
        return Err(CliError::Config(format!(
            "checkpoint expects {} history, {} future frames and {} neighbors; configure t_h, t_f, frame_rate and n_max to match",
            pc.history_frames, pc.future_frames, pc.n_max
        )));
    }
    let scenarios = cfg.load_scenarios()?;
    let mut unique: Vec<&ScenarioDataset> = Vec::new();
    for s in &scenarios {
        if !unique.iter().any(|u| u.scenario_id == s.scenario_id) {
            unique.push(s);
        }
    }
    let label = a.checkpoint.display().to_string();
    let report = eval_report(&ck.predictor, &ck.theta, &unique, "checkpoint", &label, None)?;
    let out = output_dir(&cfg)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    write_json(&out.join("eval.json"), &report)?;
    for s in &report.scenarios {
        println!("{:>20}: ADE {:.4}, FDE {:.4} over {} test samples", s.name, s.ade, s.fde, s.n_ts);
    }
    println!("{:>20}: ADE {:.4}, FDE {:.4}", "average", report.average_ade, report.average_fde);
    Ok(())
}
