//! Scenario data: raw tracks, prediction samples, splits and synthetic scenes.

mod samples;
mod split;
mod store;
mod synthetic;
mod tracks;

use thiserror::Error;

pub use samples::{build_samples, NeighborHistory, Position, TrajectorySample, WindowConfig, WindowStats};
pub use split::{split_dataset, ScenarioDataset, Split, SplitRatios};
pub(crate) use store::{read_json, write_json};
pub use store::{
    load_dataset, save_dataset, write_tracks_csv, DatasetCounts, DatasetManifest, MANIFEST_FILE, SAMPLES_FILE,
};
pub use synthetic::{
    generate_synthetic, generate_tracks, ScenarioFamily, SyntheticScenarioSpec,
};
pub use tracks::{parse_tracks, parse_tracks_path, AgentType, ParsedTracks, Track, TrackPoint};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("frames of track {0} are not strictly increasing")]
    NonMonotonicFrames(i64),
    #[error("timestamps of track {track_id} disagree with the frame rate at frame {frame}")]
    TimestampMismatch { track_id: i64, frame: i64 },
    #[error("input contains no data rows")]
    EmptyFile,
    #[error("malformed row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("split ratios must be nonnegative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("invalid synthetic scenario spec: {0}")]
    BadSpec(String),
    #[error("invalid window configuration: {0}")]
    BadWindow(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DataError {
    pub fn name(&self) -> &'static str {
        match self {
            DataError::MissingColumn(_) => "MissingColumn",
            DataError::NonMonotonicFrames(_) => "NonMonotonicFrames",
            DataError::TimestampMismatch { .. } => "TimestampMismatch",
            DataError::EmptyFile => "EmptyFile",
            DataError::MalformedRow { .. } => "MalformedRow",
            DataError::BadRatios(_) => "BadRatios",
            DataError::BadSpec(_) => "BadSpec",
            DataError::BadWindow(_) => "BadWindow",
            DataError::Csv(_) => "Csv",
        }
    }
}
