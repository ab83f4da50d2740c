use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Car,
    Truck,
    Other,
}

impl AgentType {
    pub fn parse(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "car" => AgentType::Car,
            "truck" | "bus" | "truck_bus" => AgentType::Truck,
            _ => AgentType::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AgentType::Car => "car",
            AgentType::Truck => "truck",
            AgentType::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub track_id: i64,
    pub frame: i64,
    /// Seconds.
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: Option<f64>,
    pub vy: Option<f64>,
    pub agent_type: AgentType,
}

/// Points of one vehicle, strictly ascending in frame. Frames may have gaps
/// where rows were rejected; [`Track::covers`] checks contiguity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: i64,
    pub agent_type: AgentType,
    pub points: Vec<TrackPoint>,
}

impl Track {
    pub fn first_frame(&self) -> i64 {
        self.points[0].frame
    }

    pub fn last_frame(&self) -> i64 {
        self.points[self.points.len() - 1].frame
    }

    fn index_of(&self, frame: i64) -> Option<usize> {
        self.points.binary_search_by_key(&frame, |p| p.frame).ok()
    }

    /// True when every frame in `from..=to` is present.
    pub fn covers(&self, from: i64, to: i64) -> bool {
        match (self.index_of(from), self.index_of(to)) {
            (Some(a), Some(b)) => (b - a) as i64 == to - from,
            _ => false,
        }
    }

    pub fn at(&self, frame: i64) -> Option<&TrackPoint> {
        self.index_of(frame).map(|i| &self.points[i])
    }

    pub fn position(&self, frame: i64) -> Option<[f64; 2]> {
        self.at(frame).map(|p| [p.x, p.y])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTracks {
    pub tracks: Vec<Track>,
    /// Rows dropped because x or y was not finite.
    pub rejected_rows: usize,
}

const MANDATORY: [&str; 6] = ["track_id", "frame_id", "timestamp_ms", "agent_type", "x", "y"];

pub fn parse_tracks_path(path: impl AsRef<Path>, frame_rate: f64) -> Result<ParsedTracks> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tracks(file, frame_rate)
}

/// Parse a trajectory log into per-vehicle tracks sorted by frame.
///
/// Column order is free. `track_id, frame_id, timestamp_ms, agent_type, x, y`
/// are required; `vx, vy` are read when present, other columns are ignored.
pub fn parse_tracks<R: Read>(source: R, frame_rate: f64) -> Result<ParsedTracks> {
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(DataError::BadWindow(format!("frame rate {frame_rate}")).into());
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(source);
    let headers = reader.headers().map_err(DataError::from)?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DataError::EmptyFile.into());
    }
    let column = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 6];
    for (slot, name) in idx.iter_mut().zip(MANDATORY) {
        *slot = column(name).ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
    }
    let [i_track, i_frame, i_ts, i_agent, i_x, i_y] = idx;
    let i_vx = column("vx");
    let i_vy = column("vy");

    let mut grouped: BTreeMap<i64, Vec<TrackPoint>> = BTreeMap::new();
    let mut rejected = 0usize;
    let mut rows = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(DataError::from)?;
        rows += 1;
        let row = row + 2;
        let int = |i: usize, what: &str| -> std::result::Result<i64, DataError> {
            let raw = record.get(i).unwrap_or("");
            raw.parse::<i64>()
                .or_else(|_| raw.parse::<f64>().map(|v| v as i64).map_err(|_| ()))
                .map_err(|_| DataError::MalformedRow {
                    row,
                    message: format!("{what} = {raw:?} is not an integer"),
                })
        };
        let float = |i: usize, what: &str| -> std::result::Result<f64, DataError> {
            let raw = record.get(i).unwrap_or("");
            raw.parse::<f64>().map_err(|_| DataError::MalformedRow {
                row,
                message: format!("{what} = {raw:?} is not a number"),
            })
        };
        let optional = |i: Option<usize>| -> Option<f64> {
            i.and_then(|i| record.get(i))
                .and_then(|raw| raw.parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        let track_id = int(i_track, "track_id")?;
        let frame = int(i_frame, "frame_id")?;
        let ts = int(i_ts, "timestamp_ms")?;
        let x = float(i_x, "x")?;
        let y = float(i_y, "y")?;
        if !(x.is_finite() && y.is_finite()) {
            rejected += 1;
            continue;
        }
        grouped.entry(track_id).or_default().push(TrackPoint {
            track_id,
            frame,
            t: ts as f64 / 1000.0,
            x,
            y,
            vx: optional(i_vx),
            vy: optional(i_vy),
            agent_type: AgentType::parse(record.get(i_agent).unwrap_or("")),
        });
    }
    if rows == 0 {
        return Err(DataError::EmptyFile.into());
    }

    // integer-millisecond timestamps round the true frame period
    let spacing_tol = 1e-6 + 5e-4;
    let period = 1.0 / frame_rate;
    let mut tracks = Vec::with_capacity(grouped.len());
    for (id, mut points) in grouped {
        points.sort_by_key(|p| p.frame);
        for pair in points.windows(2) {
            if pair[1].frame <= pair[0].frame {
                return Err(DataError::NonMonotonicFrames(id).into());
            }
            let dt = pair[1].t - pair[0].t;
            let expected = (pair[1].frame - pair[0].frame) as f64 * period;
            if (dt - expected).abs() > spacing_tol {
                return Err(DataError::TimestampMismatch {
                    track_id: id,
                    frame: pair[1].frame,
                }
                .into());
            }
        }
        let agent_type = points[0].agent_type;
        tracks.push(Track {
            id,
            agent_type,
            points,
        });
    }
    Ok(ParsedTracks {
        tracks,
        rejected_rows: rejected,
    })
}
