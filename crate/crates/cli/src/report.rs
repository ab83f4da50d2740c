//! Side-by-side tables over run directories: final ADE/FDE per scenario and
//! mode, forgetting increments, and memory/compute cost relative to gsm.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use traffic_cl::metrics::{EvalReport, ForgettingReport};
use traffic_cl::trainer::{load_plans, Mode, RunArtifacts};

use crate::commands::write_json;
use crate::CliError;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by `train`; repeat to compare runs.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    label: String,
    dir: PathBuf,
    mode: Mode,
    final_eval: EvalReport,
    forgetting: Option<ForgettingReport>,
    /// Sum of allocation plan counts, recomputed from the stored plans.
    allocated_memory: usize,
    sample_gradients: usize,
    /// Resolved run configuration echoed by `train`, when present.
    config: Option<serde_json::Value>,
}

#[derive(Debug, Serialize)]
struct Report {
    runs: Vec<RunSummary>,
    /// dgsm allocated memory over gsm allocated memory.
    cost_ratio: Option<f64>,
    /// dgsm sample-gradient count over gsm's.
    time_ratio: Option<f64>,
}

fn read_run(dir: &Path) -> Result<(RunArtifacts, Option<serde_json::Value>), CliError> {
    let path = dir.join("run.json");
    if !path.is_file() {
        return Err(CliError::MissingArtifacts(format!("{} has no run.json", dir.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let run: RunArtifacts = serde_json::from_str(&text)
        .map_err(|e| CliError::MissingArtifacts(format!("{}: {e}", path.display())))?;
    let cfg_path = dir.join(crate::commands::CONFIG_FILE);
    let config = match std::fs::read_to_string(&cfg_path) {
        Ok(t) => Some(serde_json::from_str(&t).map_err(|e| CliError::Config(format!("{}: {e}", cfg_path.display())))?),
        Err(_) => None,
    };
    Ok((run, config))
}

fn labels(runs: &[(PathBuf, Mode)]) -> Vec<String> {
    runs.iter()
        .map(|(dir, mode)| {
            if runs.iter().filter(|(_, m)| m == mode).count() > 1 {
                let base = dir.file_name().map_or_else(|| dir.display().to_string(), |s| s.to_string_lossy().into());
                format!("{mode}@{base}")
            } else {
                mode.to_string()
            }
        })
        .collect()
}

fn ratio(runs: &[RunSummary], f: impl Fn(&RunSummary) -> usize) -> Option<f64> {
    let gsm = runs.iter().find(|r| r.mode == Mode::Gsm)?;
    let dgsm = runs.iter().find(|r| r.mode == Mode::Dgsm)?;
    let den = f(gsm);
    (den > 0).then(|| f(dgsm) as f64 / den as f64)
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CliError::Config(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut loaded = Vec::with_capacity(a.runs.len());
    for dir in &a.runs {
        let (run, config) = read_run(dir)?;
        let plans = load_plans(dir).map_err(|e| CliError::context(dir.display(), e))?;
        loaded.push((dir.clone(), run, config, plans.iter().map(|p| p.total()).sum::<usize>()));
    }
    let names = labels(&loaded.iter().map(|(d, r, ..)| (d.clone(), r.mode)).collect::<Vec<_>>());
    let runs: Vec<RunSummary> = loaded
        .into_iter()
        .zip(names)
        .map(|((dir, run, config, allocated), label)| RunSummary {
            label,
            dir,
            mode: run.mode,
            final_eval: run.final_eval().clone(),
            forgetting: run.forgetting.clone(),
            allocated_memory: allocated,
            sample_gradients: run.sample_gradients,
            config,
        })
        .collect();

    // scenarios in order of first appearance across runs
    let mut scenarios: Vec<(u32, String)> = Vec::new();
    for r in &runs {
        for s in &r.final_eval.scenarios {
            if !scenarios.iter().any(|(id, _)| *id == s.scenario_id) {
                scenarios.push((s.scenario_id, s.name.clone()));
            }
        }
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let header: Vec<String> = std::iter::once("scenario".to_string())
        .chain(runs.iter().map(|r| r.label.clone()))
        .collect();
    for (file, pick, avg) in [
        ("ade.csv", (|s: &traffic_cl::metrics::ScenarioEval| s.ade) as fn(&_) -> f64, (|e: &EvalReport| e.average_ade) as fn(&EvalReport) -> f64),
        ("fde.csv", |s| s.fde, |e| e.average_fde),
    ] {
        let mut rows: Vec<Vec<String>> = scenarios
            .iter()
            .map(|(id, name)| {
                std::iter::once(name.clone())
                    .chain(runs.iter().map(|r| cell(r.final_eval.get(*id).map(pick))))
                    .collect()
            })
            .collect();
        rows.push(
            std::iter::once("average".to_string())
                .chain(runs.iter().map(|r| cell(Some(avg(&r.final_eval)))))
                .collect(),
        );
        write_table(&a.out.join(file), &header, &rows)?;
    }
    let rows: Vec<Vec<String>> = scenarios
        .iter()
        .map(|(id, name)| {
            std::iter::once(name.clone())
                .chain(runs.iter().map(|r| {
                    cell(r.forgetting.as_ref().and_then(|f| f.get(*id)).map(|e| e.increment_ade))
                }))
                .collect()
        })
        .collect();
    write_table(&a.out.join("forgetting.csv"), &header, &rows)?;

    let report = Report {
        cost_ratio: ratio(&runs, |r| r.allocated_memory),
        time_ratio: ratio(&runs, |r| r.sample_gradients),
        runs,
    };
    let gsm = report.runs.iter().find(|r| r.mode == Mode::Gsm);
    let cost_header: Vec<String> = ["run", "mode", "allocated_memory", "sample_gradients", "memory_ratio", "time_ratio"]
        .map(String::from)
        .to_vec();
    let rel = |x: usize, base: Option<usize>| base.filter(|b| *b > 0).map(|b| x as f64 / b as f64);
    let rows: Vec<Vec<String>> = report
        .runs
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.mode.to_string(),
                r.allocated_memory.to_string(),
                r.sample_gradients.to_string(),
                cell(rel(r.allocated_memory, gsm.map(|g| g.allocated_memory))),
                cell(rel(r.sample_gradients, gsm.map(|g| g.sample_gradients))),
            ]
        })
        .collect();
    write_table(&a.out.join("cost.csv"), &cost_header, &rows)?;
    write_json(&a.out.join("report.json"), &report)?;

    println!("{:>20} {}", "average ADE", report.runs.iter().map(|r| format!("{:>12}", r.label)).collect::<String>());
    println!(
        "{:>20} {}",
        "",
        report.runs.iter().map(|r| format!("{:>12.4}", r.final_eval.average_ade)).collect::<String>()
    );
    if let Some(c) = report.cost_ratio {
        println!("cost ratio dgsm/gsm: {c:.4}");
    }
    Ok(())
}
