use serde::{Deserialize, Serialize};

use super::{dist, MetricsError};
use crate::data::{Position, Track};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtcpConfig {
    /// Two paths conflict where they come within this distance (m).
    pub conflict_radius: f64,
    /// Crossings at a shallower angle are treated as car following.
    pub min_crossing_angle_deg: f64,
    /// ΔTTCP_min at or below this (s) counts as an interaction.
    pub interaction_threshold: f64,
    /// Frames where either vehicle is slower than this (m/s) are skipped.
    pub min_speed: f64,
    /// Histogram bin width (s); the last bin collects everything above
    /// `bin_width · n_bins`.
    pub bin_width: f64,
    pub n_bins: usize,
}

impl Default for TtcpConfig {
    fn default() -> Self {
        Self {
            conflict_radius: 0.5,
            min_crossing_angle_deg: 15.0,
            interaction_threshold: 3.0,
            min_speed: 0.1,
            bin_width: 1.0,
            n_bins: 10,
        }
    }
}

/// Positions and speeds of one vehicle by frame, with cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTrack {
    pub frames: Vec<i64>,
    pub positions: Vec<Position>,
    /// m/s.
    pub speeds: Vec<f64>,
    arc: Vec<f64>,
}

impl PathTrack {
    pub fn new(frames: Vec<i64>, positions: Vec<Position>, speeds: Vec<f64>) -> Result<Self, MetricsError> {
        if positions.is_empty() {
            return Err(MetricsError::Empty);
        }
        if frames.len() != positions.len() || speeds.len() != positions.len() {
            return Err(MetricsError::ShapeMismatch("frames, positions and speeds differ in length".into()));
        }
        let mut arc = Vec::with_capacity(positions.len());
        let mut s = 0.0;
        for (i, p) in positions.iter().enumerate() {
            if i > 0 {
                s += dist(positions[i - 1], *p);
            }
            arc.push(s);
        }
        Ok(Self {
            frames,
            positions,
            speeds,
            arc,
        })
    }

    /// Speeds come from the recorded velocity where present, otherwise from
    /// finite differences of positions over timestamps.
    pub fn from_track(track: &Track) -> Result<Self, MetricsError> {
        let pts = &track.points;
        let speeds = (0..pts.len())
            .map(|i| match (pts[i].vx, pts[i].vy) {
                (Some(vx), Some(vy)) => vx.hypot(vy),
                _ if pts.len() < 2 => 0.0,
                _ => {
                    let (a, b) = if i + 1 < pts.len() { (i, i + 1) } else { (i - 1, i) };
                    let dt = pts[b].t - pts[a].t;
                    (pts[b].x - pts[a].x).hypot(pts[b].y - pts[a].y) / dt
                }
            })
            .collect();
        Self::new(
            pts.iter().map(|p| p.frame).collect(),
            pts.iter().map(|p| [p.x, p.y]).collect(),
            speeds,
        )
    }

    /// Distance from `q` to the path and the arc length of the closest point.
    fn project(&self, q: Position) -> (f64, f64) {
        if self.positions.len() == 1 {
            return (dist(self.positions[0], q), 0.0);
        }
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.positions.len() - 1 {
            let (a, b) = (self.positions[i], self.positions[i + 1]);
            let len = dist(a, b);
            let u = if len > 0.0 {
                (((q[0] - a[0]) * (b[0] - a[0]) + (q[1] - a[1]) * (b[1] - a[1])) / (len * len)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let p = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
            let d = dist(p, q);
            if d < best.0 {
                best = (d, self.arc[i] + u * len);
            }
        }
        best
    }

    fn index_of(&self, frame: i64) -> Option<usize> {
        self.frames.binary_search(&frame).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtcpResult {
    /// ΔTTCP_min in seconds.
    pub value: f64,
    /// Frame attaining the minimum.
    pub frame: i64,
    pub interaction: bool,
    /// Neither vehicle passed the conflict point inside the window, so the
    /// window ended at the last common frame.
    pub unresolved: bool,
    pub skipped_frames: usize,
}

/// Minimum over common frames in `window` of `|Δl₁/v₁ − Δl₂/v₂|`, where `Δl`
/// is the remaining along-path distance to `conflict`. The window closes at
/// the first frame where either vehicle has passed the conflict point.
pub fn ttcp_min(
    path_1: &PathTrack,
    path_2: &PathTrack,
    conflict: Position,
    window: (i64, i64),
    cfg: &TtcpConfig,
) -> Result<TtcpResult, MetricsError> {
    let (d1, s1) = path_1.project(conflict);
    let (d2, s2) = path_2.project(conflict);
    if d1 > cfg.conflict_radius || d2 > cfg.conflict_radius {
        return Err(MetricsError::NoConflict);
    }
    let mut best: Option<(f64, i64)> = None;
    let mut skipped = 0;
    let mut unresolved = true;
    for frame in window.0..=window.1 {
        let (Some(i), Some(j)) = (path_1.index_of(frame), path_2.index_of(frame)) else { continue };
        let l1 = s1 - path_1.arc[i];
        let l2 = s2 - path_2.arc[j];
        if l1 < 0.0 || l2 < 0.0 {
            unresolved = false;
            break;
        }
        let (v1, v2) = (path_1.speeds[i], path_2.speeds[j]);
        if v1 < cfg.min_speed || v2 < cfg.min_speed {
            skipped += 1;
            continue;
        }
        let d = (l1 / v1 - l2 / v2).abs();
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, frame));
        }
    }
    let (value, frame) = best.ok_or(MetricsError::NoValidFrames)?;
    Ok(TtcpResult {
        value,
        frame,
        interaction: value <= cfg.interaction_threshold,
        unresolved,
        skipped_frames: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTtcp {
    pub track_1: i64,
    pub track_2: i64,
    pub conflict: Position,
    pub result: TtcpResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtcpReport {
    pub pairs: Vec<PairTtcp>,
    /// Lower bin edges in seconds; the last bin is open-ended.
    pub bin_edges: Vec<f64>,
    pub histogram: Vec<usize>,
    pub interaction_fraction: f64,
    /// Crossing pairs that never shared a frame with both vehicles moving.
    pub skipped_pairs: usize,
    pub config: TtcpConfig,
}

/// Spacing of the polylines used for crossing detection (m). Coarse enough
/// that position noise does not tilt segments past the angle threshold.
const THIN_STEP: f64 = 2.0;

/// Drop points closer than `step` to the last kept one; keep the endpoint.
fn thin(points: &[Position], step: f64) -> Vec<Position> {
    let mut out: Vec<Position> = Vec::new();
    for p in points {
        if out.last().is_none_or(|q| dist(*q, *p) >= step) {
            out.push(*p);
        }
    }
    if let (Some(last), Some(end)) = (out.last().copied(), points.last()) {
        if last != *end {
            out.push(*end);
        }
    }
    out
}

fn point_segment(q: Position, a: Position, b: Position) -> (f64, Position) {
    let len2 = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
    let u = if len2 > 0.0 {
        (((q[0] - a[0]) * (b[0] - a[0]) + (q[1] - a[1]) * (b[1] - a[1])) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let p = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
    (dist(p, q), p)
}

/// Closest approach of two segments: distance and the midpoint between the
/// closest points.
fn segment_gap(a: Position, b: Position, c: Position, d: Position) -> (f64, Position) {
    let cross = |o: Position, p: Position, q: Position| (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0]);
    let (d1, d2) = (cross(c, d, a), cross(c, d, b));
    let (d3, d4) = (cross(a, b, c), cross(a, b, d));
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        let t = d1 / (d1 - d2);
        return (0.0, [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for (q, s, e) in [(a, c, d), (b, c, d), (c, a, b), (d, a, b)] {
        let (g, p) = point_segment(q, s, e);
        if g < best.0 {
            best = (g, [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0]);
        }
    }
    best
}

fn crossing_angle(a: Position, b: Position, c: Position, d: Position) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1]];
    let v = [d[0] - c[0], d[1] - c[1]];
    let cos = (u[0] * v[0] + u[1] * v[1]).abs() / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
    cos.min(1.0).acos().to_degrees()
}

fn bbox(p: &[Position]) -> [f64; 4] {
    p.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, q| {
        [b[0].min(q[0]), b[1].min(q[1]), b[2].max(q[0]), b[3].max(q[1])]
    })
}

fn boxes_touch(a: [f64; 4], b: [f64; 4], pad: f64) -> bool {
    a[0] - pad <= b[2] && b[0] - pad <= a[2] && a[1] - pad <= b[3] && b[1] - pad <= a[3]
}

/// First point along path `a` where it crosses path `b`.
fn find_conflict(a: &[Position], b: &[Position], cfg: &TtcpConfig) -> Option<Position> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let bb: Vec<[f64; 4]> = b.windows(2).map(bbox).collect();
    for s in a.windows(2) {
        let sb = bbox(s);
        for (t, tb) in b.windows(2).zip(&bb) {
            if !boxes_touch(sb, *tb, cfg.conflict_radius) {
                continue;
            }
            let (gap, mid) = segment_gap(s[0], s[1], t[0], t[1]);
            if gap <= cfg.conflict_radius && crossing_angle(s[0], s[1], t[0], t[1]) >= cfg.min_crossing_angle_deg {
                return Some(mid);
            }
        }
    }
    None
}

/// ΔTTCP_min over every pair of co-present tracks whose paths cross.
pub fn interaction_density(tracks: &[Track], cfg: &TtcpConfig) -> TtcpReport {
    let paths: Vec<Option<PathTrack>> = tracks.iter().map(|t| PathTrack::from_track(t).ok()).collect();
    let thinned: Vec<Vec<Position>> = paths
        .iter()
        .map(|p| p.as_ref().map_or_else(Vec::new, |p| thin(&p.positions, THIN_STEP)))
        .collect();
    let boxes: Vec<[f64; 4]> = thinned.iter().map(|p| bbox(p)).collect();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for i in 0..tracks.len() {
        for j in i + 1..tracks.len() {
            let (Some(p1), Some(p2)) = (&paths[i], &paths[j]) else { continue };
            let start = tracks[i].first_frame().max(tracks[j].first_frame());
            let end = tracks[i].last_frame().min(tracks[j].last_frame());
            if start > end || !boxes_touch(boxes[i], boxes[j], cfg.conflict_radius) {
                continue;
            }
            let Some(conflict) = find_conflict(&thinned[i], &thinned[j], cfg) else { continue };
            match ttcp_min(p1, p2, conflict, (start, end), cfg) {
                Ok(result) => pairs.push(PairTtcp {
                    track_1: tracks[i].id,
                    track_2: tracks[j].id,
                    conflict,
                    result,
                }),
                Err(_) => skipped += 1,
            }
        }
    }
    let mut histogram = vec![0; cfg.n_bins + 1];
    for p in &pairs {
        let bin = ((p.result.value / cfg.bin_width).floor() as usize).min(cfg.n_bins);
        histogram[bin] += 1;
    }
    let interacting = pairs.iter().filter(|p| p.result.interaction).count();
    TtcpReport {
        interaction_fraction: if pairs.is_empty() {
            0.0
        } else {
            interacting as f64 / pairs.len() as f64
        },
        bin_edges: (0..=cfg.n_bins).map(|k| k as f64 * cfg.bin_width).collect(),
        histogram,
        pairs,
        skipped_pairs: skipped,
        config: cfg.clone(),
    }
}
