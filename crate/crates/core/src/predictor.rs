//! Reference interaction-aware trajectory predictor.
//!
//! Every vehicle history (target and neighbors) goes through one shared
//! encoder `Dense(2·h → E) + tanh`. Present neighbor encodings are mean-pooled,
//! concatenated with the target encoding and decoded by
//! `Dense(2E → H) + tanh → Dense(H → 5·f)` into one bivariate Gaussian per
//! future step.
//!
//! With `normalize` on, inputs are translated by the target's last observed
//! position and divided by `position_scale`; means and standard deviations are
//! mapped back to meters, so the loss is always in the original units.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Position, TrajectorySample, WindowConfig};
use crate::nn::{reduce_shards, tanh_backward, tanh_inplace, Layout};
use crate::{Error as CrateError, Result};

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;
pub const RHO_MAX: f64 = 0.99;
const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unsupported checkpoint: {0}")]
    BadCheckpoint(String),
}

impl PredictorError {
    pub fn name(&self) -> &'static str {
        match self {
            PredictorError::ShapeMismatch(_) => "ShapeMismatch",
            PredictorError::EmptyBatch => "EmptyBatch",
            PredictorError::NonFinite(_) => "NonFinite",
            PredictorError::BadCheckpoint(_) => "BadCheckpoint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateGaussianStep {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

impl BivariateGaussianStep {
    /// `−log N(y; μ, Σ)`.
    pub fn nll(&self, y: Position) -> f64 {
        let dx = (y[0] - self.mu_x) / self.sigma_x;
        let dy = (y[1] - self.mu_y) / self.sigma_y;
        let q = 1.0 - self.rho * self.rho;
        let z = dx * dx + dy * dy - 2.0 * self.rho * dx * dy;
        LOG_2PI + self.sigma_x.ln() + self.sigma_y.ln() + 0.5 * q.ln() + z / (2.0 * q)
    }

    /// NLL and its partials with respect to `(mu_x, mu_y, sigma_x, sigma_y, rho)`.
    fn nll_grad(&self, y: Position) -> (f64, [f64; 5]) {
        let (sx, sy, r) = (self.sigma_x, self.sigma_y, self.rho);
        let dx = (y[0] - self.mu_x) / sx;
        let dy = (y[1] - self.mu_y) / sy;
        let q = 1.0 - r * r;
        let z = dx * dx + dy * dy - 2.0 * r * dx * dy;
        let nll = LOG_2PI + sx.ln() + sy.ln() + 0.5 * q.ln() + z / (2.0 * q);
        let ex = (dx - r * dy) / q;
        let ey = (dy - r * dx) / q;
        let grad = [
            -ex / sx,
            -ey / sy,
            (1.0 - dx * ex) / sx,
            (1.0 - dy * ey) / sy,
            -r / q - dx * dy / q + r * z / (q * q),
        ];
        (nll, grad)
    }

    pub fn is_valid(&self) -> bool {
        [self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.rho]
            .iter()
            .all(|v| v.is_finite())
            && self.sigma_x > 0.0
            && self.sigma_y > 0.0
            && self.rho.abs() < 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub steps: Vec<BivariateGaussianStep>,
}

/// Point estimate: the per-step means.
pub fn mean_trajectory(dist: &PredictionDistribution) -> Vec<Position> {
    dist.steps.iter().map(|s| [s.mu_x, s.mu_y]).collect()
}

/// `theta − lr · gradient`.
pub fn sgd_step(theta: &[f64], gradient: &[f64], lr: f64) -> Result<Vec<f64>> {
    if theta.len() != gradient.len() {
        return Err(PredictorError::ShapeMismatch(format!(
            "theta has {} entries, gradient {}",
            theta.len(),
            gradient.len()
        ))
        .into());
    }
    Ok(theta.iter().zip(gradient).map(|(t, g)| t - lr * g).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub history_frames: usize,
    pub future_frames: usize,
    pub n_max: usize,
    pub encoder_width: usize,
    pub hidden_width: usize,
    pub normalize: bool,
    /// Meters per unit of normalized coordinates.
    pub position_scale: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self::from_window(&WindowConfig::default())
    }
}

impl PredictorConfig {
    pub fn from_window(w: &WindowConfig) -> Self {
        Self {
            history_frames: w.history_frames(),
            future_frames: w.future_frames(),
            n_max: w.n_max,
            encoder_width: 32,
            hidden_width: 64,
            normalize: true,
            position_scale: 10.0,
        }
    }
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    target_in: Vec<f64>,
    target_enc: Vec<f64>,
    neighbor_in: Vec<Vec<f64>>,
    neighbor_enc: Vec<Vec<f64>>,
    concat: Vec<f64>,
    hidden: Vec<f64>,
    raw: Vec<f64>,
    origin: Position,
    scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub layout: Layout,
}

impl Predictor {
    pub fn new(config: PredictorConfig) -> Self {
        let e = config.encoder_width;
        let layout = Layout::new(&[
            ("encoder", 2 * config.history_frames, e),
            ("hidden", 2 * e, config.hidden_width),
            ("head", config.hidden_width, 5 * config.future_frames),
        ]);
        Self { config, layout }
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        self.layout.init(seed)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(PredictorError::ShapeMismatch(format!(
                "theta has {} entries, model needs {}",
                theta.len(),
                self.num_params()
            ))
            .into());
        }
        Ok(())
    }

    fn check_sample(&self, s: &TrajectorySample, with_future: bool) -> Result<()> {
        let h = self.config.history_frames;
        let shape = |m: String| CrateError::from(PredictorError::ShapeMismatch(m));
        if s.target_history.len() != h {
            return Err(shape(format!("target history has {} frames, expected {h}", s.target_history.len())));
        }
        if s.neighbors.len() > self.config.n_max {
            return Err(shape(format!("{} neighbor slots, expected at most {}", s.neighbors.len(), self.config.n_max)));
        }
        if let Some(n) = s.present_neighbors().find(|n| n.positions.len() != h) {
            return Err(shape(format!("neighbor {} has {} frames, expected {h}", n.track_id, n.positions.len())));
        }
        if with_future && s.target_future.len() != self.config.future_frames {
            return Err(shape(format!(
                "target future has {} frames, expected {}",
                s.target_future.len(),
                self.config.future_frames
            )));
        }
        Ok(())
    }

    fn layer(&self, name: &str) -> &crate::nn::Dense {
        self.layout.layer(name).expect("layer exists by construction")
    }

    fn run(&self, theta: &[f64], s: &TrajectorySample) -> Trace {
        let (origin, scale) = if self.config.normalize {
            (s.last_observed(), self.config.position_scale)
        } else {
            ([0.0, 0.0], 1.0)
        };
        let flatten = |ps: &[Position]| -> Vec<f64> {
            ps.iter()
                .flat_map(|p| [(p[0] - origin[0]) / scale, (p[1] - origin[1]) / scale])
                .collect()
        };
        let enc = self.layer("encoder");
        let encode = |x: &[f64]| {
            let mut z = vec![0.0; enc.n_out];
            enc.forward(theta, x, &mut z);
            tanh_inplace(&mut z);
            z
        };
        let target_in = flatten(&s.target_history);
        let target_enc = encode(&target_in);
        let neighbor_in: Vec<Vec<f64>> = s.present_neighbors().map(|n| flatten(&n.positions)).collect();
        let neighbor_enc: Vec<Vec<f64>> = neighbor_in.iter().map(|x| encode(x)).collect();

        let e = enc.n_out;
        let mut concat = vec![0.0; 2 * e];
        concat[..e].copy_from_slice(&target_enc);
        if !neighbor_enc.is_empty() {
            for z in &neighbor_enc {
                for (p, v) in concat[e..].iter_mut().zip(z) {
                    *p += v;
                }
            }
            let n = neighbor_enc.len() as f64;
            for p in &mut concat[e..] {
                *p /= n;
            }
        }
        let hid = self.layer("hidden");
        let mut hidden = vec![0.0; hid.n_out];
        hid.forward(theta, &concat, &mut hidden);
        tanh_inplace(&mut hidden);
        let head = self.layer("head");
        let mut raw = vec![0.0; head.n_out];
        head.forward(theta, &hidden, &mut raw);
        Trace {
            target_in,
            target_enc,
            neighbor_in,
            neighbor_enc,
            concat,
            hidden,
            raw,
            origin,
            scale,
        }
    }

    fn steps(&self, t: &Trace) -> Vec<BivariateGaussianStep> {
        t.raw
            .chunks_exact(5)
            .map(|o| BivariateGaussianStep {
                mu_x: t.origin[0] + t.scale * o[0],
                mu_y: t.origin[1] + t.scale * o[1],
                sigma_x: (t.scale * o[2].exp()).clamp(SIGMA_MIN, SIGMA_MAX),
                sigma_y: (t.scale * o[3].exp()).clamp(SIGMA_MIN, SIGMA_MAX),
                rho: RHO_MAX * o[4].tanh(),
            })
            .collect()
    }

    pub fn forward(&self, theta: &[f64], sample: &TrajectorySample) -> Result<PredictionDistribution> {
        self.check_theta(theta)?;
        self.check_sample(sample, false)?;
        let trace = self.run(theta, sample);
        Ok(PredictionDistribution {
            steps: self.steps(&trace),
        })
    }

    fn check_batch(&self, theta: &[f64], batch: &[&TrajectorySample]) -> Result<()> {
        if batch.is_empty() {
            return Err(PredictorError::EmptyBatch.into());
        }
        self.check_theta(theta)?;
        batch.iter().try_for_each(|s| self.check_sample(s, true))
    }

    /// Mean NLL of one sample over its future steps.
    pub fn sample_loss(&self, theta: &[f64], s: &TrajectorySample) -> f64 {
        let trace = self.run(theta, s);
        let steps = self.steps(&trace);
        steps.iter().zip(&s.target_future).map(|(g, y)| g.nll(*y)).sum::<f64>() / steps.len() as f64
    }

    /// Mean over samples and steps of the per-step NLL.
    pub fn nll_loss(&self, theta: &[f64], batch: &[&TrajectorySample]) -> Result<f64> {
        self.check_batch(theta, batch)?;
        let total = reduce_shards(batch, |chunk| {
            chunk.iter().map(|s| self.sample_loss(theta, s)).sum::<f64>()
        })
        .into_iter()
        .sum::<f64>();
        finite(total / batch.len() as f64, "loss")
    }

    /// Add the gradient of one sample's mean step NLL into `grad`.
    fn sample_gradient(&self, theta: &[f64], s: &TrajectorySample, grad: &mut [f64]) -> f64 {
        let t = self.run(theta, s);
        let steps = self.steps(&t);
        let f = steps.len() as f64;
        let mut draw = vec![0.0; t.raw.len()];
        let mut loss = 0.0;
        for (k, (g, y)) in steps.iter().zip(&s.target_future).enumerate() {
            let (nll, d) = g.nll_grad(*y);
            loss += nll;
            let o = &t.raw[5 * k..5 * k + 5];
            let dr = &mut draw[5 * k..5 * k + 5];
            dr[0] = d[0] * t.scale / f;
            dr[1] = d[1] * t.scale / f;
            // clamped sigmas pass no gradient
            if g.sigma_x > SIGMA_MIN && g.sigma_x < SIGMA_MAX {
                dr[2] = d[2] * g.sigma_x / f;
            }
            if g.sigma_y > SIGMA_MIN && g.sigma_y < SIGMA_MAX {
                dr[3] = d[3] * g.sigma_y / f;
            }
            let th = o[4].tanh();
            dr[4] = d[4] * RHO_MAX * (1.0 - th * th) / f;
        }

        let head = self.layer("head");
        let hid = self.layer("hidden");
        let enc = self.layer("encoder");
        let mut dhidden = vec![0.0; hid.n_out];
        head.backward(theta, &t.hidden, &draw, grad, Some(&mut dhidden));
        tanh_backward(&t.hidden, &mut dhidden);
        let mut dconcat = vec![0.0; 2 * enc.n_out];
        hid.backward(theta, &t.concat, &dhidden, grad, Some(&mut dconcat));

        let e = enc.n_out;
        let mut dz = dconcat[..e].to_vec();
        tanh_backward(&t.target_enc, &mut dz);
        enc.backward(theta, &t.target_in, &dz, grad, None);
        if !t.neighbor_enc.is_empty() {
            let n = t.neighbor_enc.len() as f64;
            for (x, z) in t.neighbor_in.iter().zip(&t.neighbor_enc) {
                let mut dz: Vec<f64> = dconcat[e..].iter().map(|d| d / n).collect();
                tanh_backward(z, &mut dz);
                enc.backward(theta, x, &dz, grad, None);
            }
        }
        loss / f
    }

    /// Loss and exact gradient of [`Predictor::nll_loss`].
    pub fn loss_gradient(&self, theta: &[f64], batch: &[&TrajectorySample]) -> Result<(f64, Vec<f64>)> {
        self.check_batch(theta, batch)?;
        let n = self.num_params();
        let parts = reduce_shards(batch, |chunk| {
            let mut g = vec![0.0; n];
            let l: f64 = chunk.iter().map(|s| self.sample_gradient(theta, s, &mut g)).sum();
            (l, g)
        });
        let mut loss = 0.0;
        let mut grad = vec![0.0; n];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let m = batch.len() as f64;
        for v in &mut grad {
            *v /= m;
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(PredictorError::NonFinite("gradient".into()).into());
        }
        Ok((finite(loss / m, "loss")?, grad))
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PredictorError::NonFinite(what.into()).into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub predictor: Predictor,
    pub theta: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(predictor: &Predictor, theta: &[f64]) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            predictor: predictor.clone(),
            theta: theta.to_vec(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = crate::data::read_json(path.as_ref())?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(PredictorError::BadCheckpoint(format!("version {}", ck.version)).into());
        }
        if ck.theta.len() != ck.predictor.num_params() {
            return Err(PredictorError::BadCheckpoint("parameter count does not match layout".into()).into());
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NeighborHistory;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn small_config() -> PredictorConfig {
        PredictorConfig {
            history_frames: 4,
            future_frames: 3,
            n_max: 3,
            encoder_width: 5,
            hidden_width: 6,
            normalize: true,
            position_scale: 10.0,
        }
    }

    fn walk(rng: &mut rng::Rng, n: usize, start: Position) -> Vec<Position> {
        let v = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        (0..n)
            .map(|k| {
                [
                    start[0] + v[0] * k as f64 * 0.1 + rng.random_range(-0.2..0.2),
                    start[1] + v[1] * k as f64 * 0.1 + rng.random_range(-0.2..0.2),
                ]
            })
            .collect()
    }

    fn random_sample(rng: &mut rng::Rng, cfg: &PredictorConfig) -> TrajectorySample {
        let start = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let target_history = walk(rng, cfg.history_frames, start);
        let last = target_history[cfg.history_frames - 1];
        let target_future = walk(rng, cfg.future_frames, last);
        let mut neighbors = Vec::new();
        for i in 0..cfg.n_max {
            if rng.random_bool(0.6) {
                let s = [start[0] + rng.random_range(-8.0..8.0), start[1] + rng.random_range(-8.0..8.0)];
                neighbors.push(Some(NeighborHistory {
                    track_id: i as i64,
                    positions: walk(rng, cfg.history_frames, s),
                }));
            } else {
                neighbors.push(None);
            }
        }
        TrajectorySample {
            scenario_id: 0,
            target_id: 0,
            last_observed_frame: 0,
            target_history,
            neighbors,
            target_future,
        }
    }

    fn random_theta(rng: &mut rng::Rng, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect()
    }

    #[test]
    fn output_has_five_parameters_per_future_step() {
        let p = Predictor::new(PredictorConfig::default());
        let mut rng = rng::rng_from(1);
        let s = random_sample(&mut rng, &p.config);
        let dist = p.forward(&p.init_params(0), &s).unwrap();
        assert_eq!(dist.steps.len(), 40);
        assert_eq!(p.layout.layer("head").unwrap().n_out, 5 * 40);
    }

    #[test]
    fn zero_head_gives_identical_steps() {
        let p = Predictor::new(small_config());
        let mut theta = p.init_params(2);
        p.layout.zero_layer(&mut theta, "head");
        let s = random_sample(&mut rng::rng_from(2), &p.config);
        let dist = p.forward(&theta, &s).unwrap();
        assert!(dist.steps.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn absent_slot_permutation_is_invisible() {
        let p = Predictor::new(small_config());
        let theta = p.init_params(5);
        let mut rng = rng::rng_from(3);
        let mut s = random_sample(&mut rng, &p.config);
        s.neighbors = vec![s.neighbors[0].clone().or_else(|| random_sample(&mut rng, &p.config).neighbors[0].clone()), None, None];
        let mut moved = s.clone();
        moved.neighbors.rotate_right(1);
        assert_eq!(p.forward(&theta, &s).unwrap(), p.forward(&theta, &moved).unwrap());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = Predictor::new(small_config());
        let mut s = random_sample(&mut rng::rng_from(4), &p.config);
        s.target_history.pop();
        assert!(matches!(
            p.forward(&p.init_params(0), &s),
            Err(CrateError::Predictor(PredictorError::ShapeMismatch(_)))
        ));
        assert!(matches!(
            p.nll_loss(&p.init_params(0), &[]),
            Err(CrateError::Predictor(PredictorError::EmptyBatch))
        ));
    }

    #[test]
    fn nll_at_mean_with_unit_sigma_is_log_two_pi() {
        let g = BivariateGaussianStep {
            mu_x: 3.0,
            mu_y: -1.0,
            sigma_x: 1.0,
            sigma_y: 1.0,
            rho: 0.0,
        };
        assert!((g.nll([3.0, -1.0]) - 1.8379).abs() < 1e-4);
        assert!((g.nll([3.0, -1.0]) - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_rho_factorizes() {
        let uni = |mu: f64, s: f64, y: f64| 0.5 * (2.0 * std::f64::consts::PI).ln() + s.ln() + 0.5 * ((y - mu) / s).powi(2);
        let g = BivariateGaussianStep {
            mu_x: 0.5,
            mu_y: 2.0,
            sigma_x: 0.7,
            sigma_y: 2.5,
            rho: 0.0,
        };
        let y = [1.3, -0.4];
        assert!((g.nll(y) - uni(0.5, 0.7, 1.3) - uni(2.0, 2.5, -0.4)).abs() < 1e-13);
    }

    /// Double-double arithmetic for the density oracle.
    #[derive(Clone, Copy)]
    struct Dd(f64, f64);

    impl Dd {
        fn from(v: f64) -> Self {
            Dd(v, 0.0)
        }
        fn add(self, o: Dd) -> Dd {
            let s = self.0 + o.0;
            let bb = s - self.0;
            let e = (self.0 - (s - bb)) + (o.0 - bb) + self.1 + o.1;
            let hi = s + e;
            Dd(hi, e - (hi - s))
        }
        fn neg(self) -> Dd {
            Dd(-self.0, -self.1)
        }
        fn mul(self, o: Dd) -> Dd {
            let p = self.0 * o.0;
            let e = self.0.mul_add(o.0, -p) + self.0 * o.1 + self.1 * o.0;
            let hi = p + e;
            Dd(hi, e - (hi - p))
        }
        fn div(self, o: Dd) -> Dd {
            let q = self.0 / o.0;
            let r = self.add(o.mul(Dd::from(q)).neg());
            let q2 = r.0 / o.0;
            Dd::from(q).add(Dd::from(q2))
        }
        fn ln(self) -> Dd {
            // one Newton step on exp(y) = x from the f64 estimate
            let y = self.0.ln();
            let ey = y.exp();
            let corr = self.add(Dd::from(-ey)).div(Dd::from(ey));
            Dd::from(y).add(corr)
        }
    }

    fn oracle_nll(g: &BivariateGaussianStep, y: Position) -> f64 {
        let dx = Dd::from(y[0]).add(Dd::from(-g.mu_x)).div(Dd::from(g.sigma_x));
        let dy = Dd::from(y[1]).add(Dd::from(-g.mu_y)).div(Dd::from(g.sigma_y));
        let r = Dd::from(g.rho);
        let q = Dd::from(1.0).add(r.mul(r).neg());
        let z = dx.mul(dx).add(dy.mul(dy)).add(Dd::from(2.0).mul(r).mul(dx).mul(dy).neg());
        // −log[(2π σx σy √q)^{-1} exp(−z / 2q)]
        let two_pi = Dd(std::f64::consts::TAU, 2.449_293_598_294_706_4e-16);
        let norm = two_pi.mul(Dd::from(g.sigma_x)).mul(Dd::from(g.sigma_y));
        let total = norm.ln().add(Dd::from(0.5).mul(q.ln())).add(z.div(Dd::from(2.0).mul(q)));
        total.0 + total.1
    }

    #[test]
    fn nll_matches_extended_precision_oracle() {
        let mut rng = rng::rng_from(9);
        for _ in 0..2000 {
            let g = BivariateGaussianStep {
                mu_x: rng.random_range(-50.0..50.0),
                mu_y: rng.random_range(-50.0..50.0),
                sigma_x: rng.random_range(0.05..20.0),
                sigma_y: rng.random_range(0.05..20.0),
                rho: rng.random_range(-0.99..0.99),
            };
            let y = [g.mu_x + rng.random_range(-10.0..10.0), g.mu_y + rng.random_range(-10.0..10.0)];
            let want = oracle_nll(&g, y);
            let got = g.nll(y);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn step_partials_match_finite_differences() {
        let mut rng = rng::rng_from(10);
        for _ in 0..200 {
            let p = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.3..3.0),
                rng.random_range(0.3..3.0),
                rng.random_range(-0.9..0.9),
            ];
            let y = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let mk = |p: [f64; 5]| BivariateGaussianStep {
                mu_x: p[0],
                mu_y: p[1],
                sigma_x: p[2],
                sigma_y: p[3],
                rho: p[4],
            };
            let (_, g) = mk(p).nll_grad(y);
            for i in 0..5 {
                let h = 1e-6;
                let (mut a, mut b) = (p, p);
                a[i] += h;
                b[i] -= h;
                let fd = (mk(a).nll(y) - mk(b).nll(y)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
            }
        }
    }

    /// Fourth-order central difference along coordinate `i`.
    pub(crate) fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let at = |d: f64| {
            let mut y = x.to_vec();
            y[i] += d;
            f(&y)
        };
        (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
    }

    #[test]
    fn gradient_matches_central_differences_on_random_draws() {
        for normalize in [true, false] {
            let cfg = PredictorConfig {
                normalize,
                ..small_config()
            };
            let p = Predictor::new(cfg);
            let mut rng = rng::rng_from(11);
            for draw in 0..50 {
                let theta = random_theta(&mut rng, p.num_params(), 0.3);
                let batch: Vec<TrajectorySample> = (0..3).map(|_| random_sample(&mut rng, &p.config)).collect();
                let refs: Vec<&TrajectorySample> = batch.iter().collect();
                let (loss, grad) = p.loss_gradient(&theta, &refs).unwrap();
                assert_eq!(loss, p.nll_loss(&theta, &refs).unwrap());
                for _ in 0..5 {
                    let i = rng.random_range(0..theta.len());
                    let fd = central_difference(|t| p.nll_loss(t, &refs).unwrap(), &theta, i, 1e-5);
                    // roundoff in the differenced loss scales with its magnitude
                    let floor = 1e-6 * loss.abs().max(1.0);
                    let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor);
                    assert!(rel < 1e-4, "draw {draw} coord {i}: fd {fd} vs {}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let p = Predictor::new(small_config());
        let theta = p.init_params(1);
        let mut rng = rng::rng_from(12);
        let batch: Vec<TrajectorySample> = (0..13).map(|_| random_sample(&mut rng, &p.config)).collect();
        let once: Vec<&TrajectorySample> = batch.iter().collect();
        let twice: Vec<&TrajectorySample> = batch.iter().chain(&batch).collect();
        let (la, ga) = p.loss_gradient(&theta, &once).unwrap();
        let (lb, gb) = p.loss_gradient(&theta, &twice).unwrap();
        assert!((la - lb).abs() < 1e-12 * la.abs().max(1.0));
        for (a, b) in ga.iter().zip(&gb) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn loss_and_gradient_are_deterministic() {
        let p = Predictor::new(small_config());
        let theta = p.init_params(1);
        let mut rng = rng::rng_from(13);
        let batch: Vec<TrajectorySample> = (0..100).map(|_| random_sample(&mut rng, &p.config)).collect();
        let refs: Vec<&TrajectorySample> = batch.iter().collect();
        let a = p.loss_gradient(&theta, &refs).unwrap();
        let b = p.loss_gradient(&theta, &refs).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Minimize with BFGS and a backtracking line search.
    fn bfgs(f: impl Fn(&[f64]) -> (f64, Vec<f64>), mut x: Vec<f64>, iters: usize) -> Vec<f64> {
        let n = x.len();
        let mut hinv = vec![0.0; n * n];
        for i in 0..n {
            hinv[i * n + i] = 1.0;
        }
        let (mut fx, mut g) = f(&x);
        for _ in 0..iters {
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn < 1e-10 {
                break;
            }
            let mut d: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| hinv[i * n + j] * g[j]).sum::<f64>()).collect();
            let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if slope >= 0.0 {
                hinv.iter_mut().enumerate().for_each(|(k, h)| *h = if k % (n + 1) == 0 { 1.0 } else { 0.0 });
                d = g.iter().map(|v| -v).collect();
                slope = -gn * gn;
            }
            let mut step = 1.0;
            let (xn, fxn, gnew) = loop {
                let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
                let (fxn, gnew) = f(&xn);
                if fxn <= fx + 1e-4 * step * slope || step < 1e-12 {
                    break (xn, fxn, gnew);
                }
                step *= 0.5;
            };
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            if sy > 1e-14 {
                let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| hinv[i * n + j] * y[j]).sum()).collect();
                let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    for j in 0..n {
                        hinv[i * n + j] += (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                    }
                }
            }
            x = xn;
            fx = fxn;
            g = gnew;
        }
        x
    }

    #[test]
    fn gradient_vanishes_at_a_located_minimum() {
        let cfg = PredictorConfig {
            history_frames: 2,
            future_frames: 1,
            n_max: 1,
            encoder_width: 2,
            hidden_width: 3,
            normalize: true,
            position_scale: 10.0,
        };
        let p = Predictor::new(cfg);
        let base = TrajectorySample {
            scenario_id: 0,
            target_id: 0,
            last_observed_frame: 1,
            target_history: vec![[0.0, 0.0], [1.0, 0.2]],
            neighbors: vec![None],
            target_future: vec![[2.0, 0.0]],
        };
        // one input with three futures keeps the maximum-likelihood sigma away from zero
        let futures = [[2.0, 0.4], [2.3, 0.1], [1.8, 0.9]];
        let batch: Vec<TrajectorySample> = futures
            .iter()
            .map(|f| TrajectorySample {
                target_future: vec![*f],
                ..base.clone()
            })
            .collect();
        let refs: Vec<&TrajectorySample> = batch.iter().collect();
        let theta = bfgs(|t| p.loss_gradient(t, &refs).unwrap(), p.init_params(3), 2000);
        let (_, g) = p.loss_gradient(&theta, &refs).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn sgd_step_examples() {
        assert_eq!(sgd_step(&[1.0, 1.0], &[1.0, -1.0], 0.001).unwrap(), vec![0.999, 1.001]);
        assert_eq!(sgd_step(&[0.3, -2.0], &[5.0, 7.0], 0.0).unwrap(), vec![0.3, -2.0]);
        assert!(sgd_step(&[0.0], &[1.0, 2.0], 0.1).is_err());
        let g = [0.25, -0.5];
        let two = sgd_step(&sgd_step(&[1.0, 2.0], &g, 0.5).unwrap(), &g, 0.5).unwrap();
        let one = sgd_step(&[1.0, 2.0], &[0.5, -1.0], 0.5).unwrap();
        assert_eq!(two, one);
    }

    #[test]
    fn mean_trajectory_copies_means() {
        let mut rng = rng::rng_from(14);
        let steps: Vec<BivariateGaussianStep> = (0..7)
            .map(|_| BivariateGaussianStep {
                mu_x: rng.random(),
                mu_y: rng.random(),
                sigma_x: 1.0,
                sigma_y: 2.0,
                rho: 0.1,
            })
            .collect();
        let dist = PredictionDistribution { steps: steps.clone() };
        let traj = mean_trajectory(&dist);
        for (p, s) in traj.iter().zip(&steps) {
            assert_eq!(p[0], s.mu_x);
            assert_eq!(p[1], s.mu_y);
        }
        let line = PredictionDistribution {
            steps: (0..4)
                .map(|k| BivariateGaussianStep {
                    mu_x: k as f64,
                    mu_y: 2.0 * k as f64,
                    sigma_x: 1.0,
                    sigma_y: 1.0,
                    rho: 0.0,
                })
                .collect(),
        };
        assert_eq!(mean_trajectory(&line), vec![[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let p = Predictor::new(small_config());
        let theta = random_theta(&mut rng::rng_from(15), p.num_params(), 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::new(&p, &theta).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.predictor, p);
        assert!(back.theta.iter().zip(&theta).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn outputs_stay_valid_for_any_theta(seed in any::<u64>(), std in 0.0f64..50.0) {
            let p = Predictor::new(small_config());
            let mut rng = rng::rng_from(seed);
            let theta = random_theta(&mut rng, p.num_params(), std);
            let s = random_sample(&mut rng, &p.config);
            let dist = p.forward(&theta, &s).unwrap();
            prop_assert!(dist.steps.iter().all(|g| g.is_valid()));
        }
    }
}
