use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ScenarioDataset, Split, SplitRatios, Track, TrajectorySample, WindowConfig};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub tracks: usize,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub skipped_windows: usize,
    pub rejected_rows: usize,
}

/// Summary written next to the samples of a persisted scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub scenario_id: u32,
    pub frame_rate: f64,
    pub window: WindowConfig,
    pub counts: DatasetCounts,
    pub split_seed: u64,
    pub ratios: SplitRatios,
    pub split: Split,
    /// Where the samples came from: a CSV path or a synthetic spec.
    pub source: serde_json::Value,
}

impl DatasetManifest {
    pub fn new(
        dataset: &ScenarioDataset,
        window: &WindowConfig,
        tracks: usize,
        skipped_windows: usize,
        rejected_rows: usize,
        source: serde_json::Value,
    ) -> Self {
        Self {
            name: dataset.name.clone(),
            scenario_id: dataset.scenario_id,
            frame_rate: window.frame_rate,
            window: window.clone(),
            counts: DatasetCounts {
                tracks,
                samples: dataset.samples.len(),
                train: dataset.split.train.len(),
                val: dataset.split.val.len(),
                test: dataset.split.test.len(),
                skipped_windows,
                rejected_rows,
            },
            split_seed: dataset.split_seed,
            ratios: dataset.ratios,
            split: dataset.split.clone(),
            source,
        }
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Write `manifest.json` and `samples.json` into `dir`, creating it.
pub fn save_dataset(dir: impl AsRef<Path>, manifest: &DatasetManifest, samples: &[TrajectorySample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(MANIFEST_FILE), manifest)?;
    write_json(&dir.join(SAMPLES_FILE), &samples)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(ScenarioDataset, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let samples: Vec<TrajectorySample> = read_json(&dir.join(SAMPLES_FILE))?;
    let dataset = ScenarioDataset {
        scenario_id: manifest.scenario_id,
        name: manifest.name.clone(),
        samples,
        split: manifest.split.clone(),
        split_seed: manifest.split_seed,
        ratios: manifest.ratios,
    };
    Ok((dataset, manifest))
}

/// Write tracks in the ingestion CSV schema.
pub fn write_tracks_csv<W: Write>(out: W, tracks: &[Track]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(e.into());
    w.write_record(["track_id", "frame_id", "timestamp_ms", "agent_type", "x", "y", "vx", "vy"])
        .map_err(csv_err)?;
    for t in tracks {
        for p in &t.points {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                p.track_id.to_string(),
                p.frame.to_string(),
                ((p.t * 1000.0).round() as i64).to_string(),
                p.agent_type.as_str().to_string(),
                p.x.to_string(),
                p.y.to_string(),
                opt(p.vx),
                opt(p.vy),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(csv::Error::from(e).into()))
}
