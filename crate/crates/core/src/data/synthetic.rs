//! Synthetic traffic scenes for desk-scale experiments.
//!
//! Four scene families with distinct motion patterns, all laid out around the
//! origin so that they differ in behavior rather than in absolute location:
//!
//! - `straight_flow`: parallel lanes heading +x at constant speed.
//! - `merge`: a ramp converging into the main lane at `merge_angle_deg`.
//! - `roundabout`: counter-clockwise circulation on a circle of `radius`,
//!   entered and left through curved flares on one of four arms.
//! - `intersection_stop`: four-way stop with straight, left and right
//!   movements and a stop-and-go speed profile.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    build_samples, split_dataset, AgentType, DataError, Position, ScenarioDataset, SplitRatios,
    Track, TrackPoint, WindowConfig,
};
use crate::{rng, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioFamily {
    StraightFlow,
    Merge,
    Roundabout,
    IntersectionStop,
}

impl ScenarioFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioFamily::StraightFlow => "straight_flow",
            ScenarioFamily::Merge => "merge",
            ScenarioFamily::Roundabout => "roundabout",
            ScenarioFamily::IntersectionStop => "intersection_stop",
        }
    }
}

impl std::str::FromStr for ScenarioFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "straight_flow" => Ok(ScenarioFamily::StraightFlow),
            "merge" => Ok(ScenarioFamily::Merge),
            "roundabout" => Ok(ScenarioFamily::Roundabout),
            "intersection_stop" => Ok(ScenarioFamily::IntersectionStop),
            other => Err(format!("unknown scenario family `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticScenarioSpec {
    pub name: String,
    pub scenario_id: u32,
    pub family: ScenarioFamily,
    pub n_vehicles: usize,
    /// Cruise speed bounds in m/s.
    pub speed_range: [f64; 2],
    /// Standard deviation of positional noise in meters.
    pub noise_std: f64,
    /// Roundabout radius in meters.
    pub radius: f64,
    pub merge_angle_deg: f64,
    /// Scene length in seconds.
    pub duration_s: f64,
    pub seed: u64,
    pub window: WindowConfig,
    pub ratios: SplitRatios,
    pub split_seed: u64,
}

impl Default for SyntheticScenarioSpec {
    fn default() -> Self {
        Self {
            name: "straight_flow".into(),
            scenario_id: 0,
            family: ScenarioFamily::StraightFlow,
            n_vehicles: 40,
            speed_range: [6.0, 12.0],
            noise_std: 0.05,
            radius: 20.0,
            merge_angle_deg: 25.0,
            duration_s: 60.0,
            seed: 0,
            window: WindowConfig {
                stride: 5,
                ..WindowConfig::default()
            },
            ratios: SplitRatios::default(),
            split_seed: 0,
        }
    }
}

impl SyntheticScenarioSpec {
    pub fn new(family: ScenarioFamily, scenario_id: u32, seed: u64) -> Self {
        Self {
            name: family.as_str().into(),
            scenario_id,
            family,
            seed,
            split_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), DataError> {
        let bad = |m: &str| Err(DataError::BadSpec(m.to_string()));
        let [lo, hi] = self.speed_range;
        if self.n_vehicles == 0 {
            return bad("n_vehicles must be positive");
        }
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
            return bad("speed_range must satisfy 0 < min <= max");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be nonnegative");
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if !(self.merge_angle_deg > 0.0 && self.merge_angle_deg < 90.0) {
            return bad("merge_angle_deg must lie in (0, 90)");
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        self.window.validate()
    }
}

#[derive(Debug, Clone, Copy)]
enum Segment {
    Line {
        start: Position,
        dir: Position,
        len: f64,
    },
    /// Arc from `start_angle`, sweeping `sweep` radians (positive = CCW).
    Arc {
        center: Position,
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { len, .. } => len,
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Position and unit tangent at arc length `s` along the segment.
    fn eval(&self, s: f64) -> (Position, Position) {
        match *self {
            Segment::Line { start, dir, .. } => {
                ([start[0] + dir[0] * s, start[1] + dir[1] * s], dir)
            }
            Segment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let sign = sweep.signum();
                let a = start_angle + sign * s / radius;
                let (sin, cos) = a.sin_cos();
                (
                    [center[0] + radius * cos, center[1] + radius * sin],
                    [-sign * sin, sign * cos],
                )
            }
        }
    }

    fn rotated(&self, angle: f64) -> Segment {
        let rot = |p: Position| {
            let (s, c) = angle.sin_cos();
            [c * p[0] - s * p[1], s * p[0] + c * p[1]]
        };
        match *self {
            Segment::Line { start, dir, len } => Segment::Line {
                start: rot(start),
                dir: rot(dir),
                len,
            },
            Segment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => Segment::Arc {
                center: rot(center),
                radius,
                start_angle: start_angle + angle,
                sweep,
            },
        }
    }
}

struct Path(Vec<Segment>);

impl Path {
    fn length(&self) -> f64 {
        self.0.iter().map(Segment::length).sum()
    }

    fn eval(&self, mut s: f64) -> (Position, Position) {
        let last = self.0.len() - 1;
        for (i, seg) in self.0.iter().enumerate() {
            let len = seg.length();
            if s <= len || i == last {
                return seg.eval(s.min(len));
            }
            s -= len;
        }
        unreachable!("paths are non-empty")
    }
}

fn line(start: Position, dir: Position, len: f64) -> Segment {
    let n = dir[0].hypot(dir[1]);
    Segment::Line {
        start,
        dir: [dir[0] / n, dir[1] / n],
        len,
    }
}

/// Arc lengths along the path at each frame, starting from zero.
enum Profile {
    Constant(f64),
    StopAndGo {
        cruise: f64,
        stop_at: f64,
        wait: f64,
    },
}

const DECEL: f64 = 2.5;
const ACCEL: f64 = 2.0;

impl Profile {
    /// Arc length and speed at each frame until `max_s` is reached or
    /// `max_frames` frames were produced.
    fn sample(&self, rate: f64, max_s: f64, max_frames: usize) -> Vec<(f64, f64)> {
        let dt = 1.0 / rate;
        let mut out = Vec::new();
        match *self {
            Profile::Constant(v) => {
                for k in 0..max_frames {
                    let s = v * (k as f64 * dt);
                    if s > max_s {
                        break;
                    }
                    out.push((s, v));
                }
            }
            Profile::StopAndGo {
                cruise,
                stop_at,
                wait,
            } => {
                const SUB: usize = 20;
                let h = dt / SUB as f64;
                let brake_from = (stop_at - cruise * cruise / (2.0 * DECEL)).max(0.0);
                let (mut s, mut v, mut waited, mut stopped) = (0.0f64, cruise, 0.0f64, false);
                for _ in 0..max_frames {
                    if s > max_s {
                        break;
                    }
                    out.push((s, v));
                    for _ in 0..SUB {
                        if !stopped && s >= brake_from {
                            // constant deceleration that lands exactly on the stop line
                            let remaining = (stop_at - s).max(1e-9);
                            let a = v * v / (2.0 * remaining);
                            v = (v - a * h).max(0.0);
                            s = (s + v * h).min(stop_at);
                            if v <= 1e-3 || s >= stop_at {
                                v = 0.0;
                                stopped = true;
                            }
                        } else if stopped && waited < wait {
                            waited += h;
                        } else {
                            v = (v + ACCEL * h).min(cruise);
                            s += v * h;
                        }
                    }
                }
            }
        }
        out
    }
}

fn straight_flow(rng: &mut rng::Rng) -> (Path, bool) {
    let lane = rng.random_range(0..3) as f64 * 3.5;
    (Path(vec![line([-60.0, lane], [1.0, 0.0], 120.0)]), false)
}

fn merge(rng: &mut rng::Rng, angle_deg: f64) -> (Path, bool) {
    let alpha = angle_deg.to_radians();
    match rng.random_range(0..3) {
        0 => (Path(vec![line([-70.0, 3.5], [1.0, 0.0], 130.0)]), false),
        1 => (Path(vec![line([-70.0, 0.0], [1.0, 0.0], 130.0)]), false),
        _ => {
            let ramp = 50.0;
            let start = [-ramp * alpha.cos(), -ramp * alpha.sin()];
            (
                Path(vec![
                    line(start, [alpha.cos(), alpha.sin()], ramp),
                    line([0.0, 0.0], [1.0, 0.0], 60.0),
                ]),
                false,
            )
        }
    }
}

/// Enter on a clockwise flare tangent to the circle, circulate
/// counter-clockwise, leave on a mirrored flare. Every piece is curved.
fn roundabout(rng: &mut rng::Rng, radius: f64) -> (Path, bool) {
    let entry = rng.random_range(0..4) as f64 * FRAC_PI_2;
    let sweep = rng.random_range(FRAC_PI_2..1.5 * PI);
    let exit = entry + sweep;
    let flare = |at: f64, start_angle: f64| Segment::Arc {
        center: [(radius + FLARE_RADIUS) * at.cos(), (radius + FLARE_RADIUS) * at.sin()],
        radius: FLARE_RADIUS,
        start_angle,
        sweep: -FLARE_SWEEP,
    };
    (
        Path(vec![
            flare(entry, entry + PI + FLARE_SWEEP),
            Segment::Arc {
                center: [0.0, 0.0],
                radius,
                start_angle: entry,
                sweep,
            },
            flare(exit, exit + PI),
        ]),
        false,
    )
}

const FLARE_RADIUS: f64 = 30.0;
const FLARE_SWEEP: f64 = PI / 3.0;

/// Canonical approach drives north in the lane at x = +1.75 and stops at
/// y = -7; the movement is then rotated onto one of four approaches.
fn intersection(rng: &mut rng::Rng) -> (Path, bool) {
    let approach = 33.0;
    let exit = 33.0;
    let segments = match rng.random_range(0..20) {
        0..=13 => vec![line([1.75, -40.0], [0.0, 1.0], 80.0)],
        14..=16 => vec![
            line([1.75, -40.0], [0.0, 1.0], approach),
            Segment::Arc {
                center: [7.0, -7.0],
                radius: 5.25,
                start_angle: PI,
                sweep: -FRAC_PI_2,
            },
            line([7.0, -1.75], [1.0, 0.0], exit),
        ],
        _ => vec![
            line([1.75, -40.0], [0.0, 1.0], approach),
            Segment::Arc {
                center: [-7.0, -7.0],
                radius: 8.75,
                start_angle: 0.0,
                sweep: FRAC_PI_2,
            },
            line([-7.0, 1.75], [-1.0, 0.0], exit),
        ],
    };
    let quarter = rng.random_range(0..4) as f64 * FRAC_PI_2;
    (Path(segments.iter().map(|s| s.rotated(quarter)).collect()), true)
}

/// Generate raw tracks for a synthetic scene. Same spec, same tracks, bit
/// for bit.
pub fn generate_tracks(spec: &SyntheticScenarioSpec) -> Result<Vec<Track>> {
    spec.validate()?;
    let rate = spec.window.frame_rate;
    let total_frames = (spec.duration_s * rate).round() as usize;
    let min_life = spec.window.history_frames() + spec.window.future_frames();
    let latest_spawn = total_frames.saturating_sub(min_life).max(1);
    let mut tracks = Vec::with_capacity(spec.n_vehicles);
    for i in 0..spec.n_vehicles {
        let mut rng = rng::stream(spec.seed, i as u64 + 1);
        let (path, stops) = match spec.family {
            ScenarioFamily::StraightFlow => straight_flow(&mut rng),
            ScenarioFamily::Merge => merge(&mut rng, spec.merge_angle_deg),
            ScenarioFamily::Roundabout => roundabout(&mut rng, spec.radius),
            ScenarioFamily::IntersectionStop => intersection(&mut rng),
        };
        let [lo, hi] = spec.speed_range;
        let cruise = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let profile = if stops {
            Profile::StopAndGo {
                cruise,
                stop_at: 33.0,
                wait: rng.random_range(0.5..2.0),
            }
        } else {
            Profile::Constant(cruise)
        };
        let spawn = rng.random_range(0..latest_spawn);
        let states = profile.sample(rate, path.length(), total_frames - spawn);
        let id = i as i64 + 1;
        let agent_type = if rng.random_bool(0.1) {
            AgentType::Truck
        } else {
            AgentType::Car
        };
        let points = states
            .iter()
            .enumerate()
            .map(|(k, &(s, v))| {
                let (pos, tangent) = path.eval(s);
                let (nx, ny) = if spec.noise_std > 0.0 {
                    let zx: f64 = StandardNormal.sample(&mut rng);
                    let zy: f64 = StandardNormal.sample(&mut rng);
                    (zx * spec.noise_std, zy * spec.noise_std)
                } else {
                    (0.0, 0.0)
                };
                let frame = (spawn + k) as i64;
                TrackPoint {
                    track_id: id,
                    frame,
                    t: frame as f64 / rate,
                    x: pos[0] + nx,
                    y: pos[1] + ny,
                    vx: Some(v * tangent[0]),
                    vy: Some(v * tangent[1]),
                    agent_type,
                }
            })
            .collect::<Vec<_>>();
        if !points.is_empty() {
            tracks.push(Track {
                id,
                agent_type,
                points,
            });
        }
    }
    Ok(tracks)
}

/// Generate, window and split a synthetic scenario.
pub fn generate_synthetic(spec: &SyntheticScenarioSpec) -> Result<ScenarioDataset> {
    let tracks = generate_tracks(spec)?;
    let (samples, _) = build_samples(&tracks, &spec.window, spec.scenario_id)?;
    Ok(split_dataset(
        spec.scenario_id,
        spec.name.clone(),
        samples,
        spec.ratios,
        spec.split_seed,
    )?)
}
