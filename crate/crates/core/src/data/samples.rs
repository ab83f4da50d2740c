use serde::{Deserialize, Serialize};

use super::{DataError, Track};
use crate::Result;

pub type Position = [f64; 2];

/// Windowing parameters. Horizons are in seconds; frame counts are derived
/// from the frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub t_h: f64,
    pub t_f: f64,
    pub frame_rate: f64,
    pub n_max: usize,
    /// Frames between consecutive window starts of one target.
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_h: 2.0,
            t_f: 4.0,
            frame_rate: 10.0,
            n_max: 5,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn history_frames(&self) -> usize {
        (self.t_h * self.frame_rate).round() as usize
    }

    pub fn future_frames(&self) -> usize {
        (self.t_f * self.frame_rate).round() as usize
    }

    pub fn validate(&self) -> std::result::Result<(), DataError> {
        let bad = |m: String| Err(DataError::BadWindow(m));
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return bad(format!("frame_rate must be positive, got {}", self.frame_rate));
        }
        if !(self.t_h > 0.0 && self.t_f > 0.0) {
            return bad(format!("t_h and t_f must be positive, got {} and {}", self.t_h, self.t_f));
        }
        if self.history_frames() == 0 || self.future_frames() == 0 {
            return bad("horizons shorter than one frame".into());
        }
        if self.stride == 0 {
            return bad("stride must be at least one frame".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborHistory {
    pub track_id: i64,
    pub positions: Vec<Position>,
}

/// One prediction example: observed histories and the target's future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub scenario_id: u32,
    pub target_id: i64,
    /// Frame index of the last observed history position.
    pub last_observed_frame: i64,
    pub target_history: Vec<Position>,
    /// Fixed number of slots, nearest neighbor first; `None` marks an absent
    /// neighbor and carries no positions.
    pub neighbors: Vec<Option<NeighborHistory>>,
    pub target_future: Vec<Position>,
}

impl TrajectorySample {
    pub fn neighbor_mask(&self) -> Vec<bool> {
        self.neighbors.iter().map(Option::is_some).collect()
    }

    pub fn present_neighbors(&self) -> impl Iterator<Item = &NeighborHistory> {
        self.neighbors.iter().flatten()
    }

    pub fn last_observed(&self) -> Position {
        self.target_history[self.target_history.len() - 1]
    }

    /// Check shape and finiteness against the expected frame counts.
    pub fn validate(&self, history: usize, future: usize) -> std::result::Result<(), String> {
        if self.target_history.len() != history {
            return Err(format!(
                "target history has {} frames, expected {history}",
                self.target_history.len()
            ));
        }
        if self.target_future.len() != future {
            return Err(format!(
                "target future has {} frames, expected {future}",
                self.target_future.len()
            ));
        }
        for n in self.present_neighbors() {
            if n.positions.len() != history {
                return Err(format!(
                    "neighbor {} has {} frames, expected {history}",
                    n.track_id,
                    n.positions.len()
                ));
            }
        }
        let finite = self
            .target_history
            .iter()
            .chain(&self.target_future)
            .chain(self.present_neighbors().flat_map(|n| n.positions.iter()))
            .all(|p| p[0].is_finite() && p[1].is_finite());
        if !finite {
            return Err("non-finite coordinate".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowStats {
    pub emitted: usize,
    /// Candidate windows dropped because the target was not present for every
    /// frame of the span.
    pub skipped: usize,
}

fn squared_distance(a: Position, b: Position) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn slice_positions(track: &Track, from: i64, len: usize) -> Vec<Position> {
    (0..len as i64)
        .map(|k| track.position(from + k).expect("span checked by covers()"))
        .collect()
}

/// Window tracks into prediction samples.
///
/// For every target and every window start (advancing by `stride`) where the
/// target exists over the full history + future span, one sample is emitted.
/// Neighbors are the `n_max` other tracks present over the whole history,
/// ranked by Euclidean distance at the last observed frame (ties by track id).
pub fn build_samples(
    tracks: &[Track],
    config: &WindowConfig,
    scenario_id: u32,
) -> Result<(Vec<TrajectorySample>, WindowStats)> {
    config.validate()?;
    let h = config.history_frames();
    let f = config.future_frames();
    let span = (h + f) as i64;

    let mut ordered: Vec<&Track> = tracks.iter().filter(|t| !t.points.is_empty()).collect();
    ordered.sort_by_key(|t| t.id);

    let mut samples = Vec::new();
    let mut stats = WindowStats::default();
    for target in &ordered {
        let first = target.first_frame();
        let last = target.last_frame();
        let mut start = first;
        while start + span - 1 <= last {
            let end = start + span - 1;
            let observed = start + h as i64 - 1;
            if !target.covers(start, end) {
                stats.skipped += 1;
                start += config.stride as i64;
                continue;
            }
            let anchor = target.position(observed).expect("covered");
            let mut candidates: Vec<(f64, &Track)> = ordered
                .iter()
                .filter(|t| t.id != target.id && t.covers(start, observed))
                .map(|t| (squared_distance(t.position(observed).expect("covered"), anchor), *t))
                .collect();
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
            let mut neighbors: Vec<Option<NeighborHistory>> = candidates
                .iter()
                .take(config.n_max)
                .map(|(_, t)| {
                    Some(NeighborHistory {
                        track_id: t.id,
                        positions: slice_positions(t, start, h),
                    })
                })
                .collect();
            neighbors.resize(config.n_max, None);
            samples.push(TrajectorySample {
                scenario_id,
                target_id: target.id,
                last_observed_frame: observed,
                target_history: slice_positions(target, start, h),
                neighbors,
                target_future: slice_positions(target, observed + 1, f),
            });
            stats.emitted += 1;
            start += config.stride as i64;
        }
    }
    Ok((samples, stats))
}
