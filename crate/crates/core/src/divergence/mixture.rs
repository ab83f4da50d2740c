use rand::distr::{weighted::WeightedIndex, Distribution};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DivergenceError;
use crate::nn::log_sum_exp;
use crate::rng;

/// Log densities below this are clamped, so underflow never yields −∞.
pub const LOG_DENSITY_FLOOR: f64 = -1e4;
const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn single(mean: Vec<f64>, variance: Vec<f64>) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            variances: vec![variance],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.k())
            .map(|c| {
                let quad: f64 = y
                    .iter()
                    .zip(&self.means[c])
                    .zip(&self.variances[c])
                    .map(|((y, m), v)| LOG_2PI + v.ln() + (y - m) * (y - m) / v)
                    .sum();
                self.weights[c].ln() - 0.5 * quad
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> Vec<f64> {
        let c = if self.k() == 1 {
            0
        } else {
            WeightedIndex::new(&self.weights).map_or(0, |w| w.sample(rng))
        };
        self.means[c]
            .iter()
            .zip(&self.variances[c])
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KldEstimate {
    pub mean: f64,
    /// Standard error of the mean log-ratio.
    pub std_error: f64,
    /// Evaluations where a log density hit [`LOG_DENSITY_FLOOR`].
    pub floored: usize,
}

/// Monte-Carlo `KL(p1 ‖ p2)`: mean of `log p1(Y) − log p2(Y)` over `n_mc`
/// draws `Y ~ p1`.
///
/// Both log densities are clamped at [`LOG_DENSITY_FLOOR`]; with `p1 == p2`
/// every term cancels exactly.
pub fn mc_kld(
    p1: &GaussianMixture,
    p2: &GaussianMixture,
    n_mc: usize,
    seed: u64,
) -> Result<KldEstimate, DivergenceError> {
    if p1.dim() != p2.dim() {
        return Err(DivergenceError::DimensionMismatch {
            left: p1.dim(),
            right: p2.dim(),
        });
    }
    if n_mc == 0 {
        return Err(DivergenceError::ShapeMismatch("n_mc must be at least 1".into()));
    }
    let mut rng = rng::rng_from(seed);
    let mut floored = 0;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_mc {
        let y = p1.sample(&mut rng);
        let mut clamp = |v: f64| {
            if v < LOG_DENSITY_FLOOR || v.is_nan() {
                floored += 1;
                LOG_DENSITY_FLOOR
            } else {
                v
            }
        };
        let r = clamp(p1.log_density(&y)) - clamp(p2.log_density(&y));
        sum += r;
        sum_sq += r * r;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = if n_mc > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(KldEstimate {
        mean,
        std_error: (var / n).sqrt(),
        floored,
    })
}
