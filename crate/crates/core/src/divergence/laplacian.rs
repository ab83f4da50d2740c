use serde::{Deserialize, Serialize};

use super::DivergenceError;
use crate::data::Position;

/// Effective distance (m) used for the affinity of an absent neighbor.
pub const FAR_DISTANCE: f64 = 100.0;

/// Time-weighted affinity graph over the surrounding vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionLaplacian {
    pub n: usize,
    /// Row-major `n × n`.
    pub a: Vec<f64>,
    /// Row-major `n × n`, `D − A`.
    pub l: Vec<f64>,
    pub lambda_decay: f64,
    /// True when at least one slot was absent and imputed.
    pub imputed: bool,
}

/// Build `A`, `D` and `L = D − A` from `n` vehicle histories over the same
/// frames; `None` marks an absent vehicle.
///
/// `a_ij = exp(−Σ_k ω_k e_ij^k / Σ_k ω_k)` with `ω_k = λ^(T−1−k)` so the last
/// frame weighs 1. Absent vehicles get affinity `exp(−FAR_DISTANCE)` to every
/// other vehicle.
pub fn interaction_laplacian(
    histories: &[Option<&[Position]>],
    lambda_decay: f64,
) -> Result<InteractionLaplacian, DivergenceError> {
    if !(lambda_decay > 0.0 && lambda_decay <= 1.0) {
        return Err(DivergenceError::BadLambda(lambda_decay));
    }
    let n = histories.len();
    let frames = histories.iter().flatten().map(|h| h.len()).next().unwrap_or(0);
    if let Some(h) = histories.iter().flatten().find(|h| h.len() != frames) {
        return Err(DivergenceError::ShapeMismatch(format!(
            "histories of {} and {frames} frames",
            h.len()
        )));
    }
    if histories.iter().flatten().count() > 0 && frames == 0 {
        return Err(DivergenceError::ShapeMismatch("empty history".into()));
    }
    let weights: Vec<f64> = (0..frames).map(|k| lambda_decay.powi((frames - 1 - k) as i32)).collect();
    let wsum: f64 = weights.iter().sum();
    let far = (-FAR_DISTANCE).exp();

    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = match (histories[i], histories[j]) {
                (Some(hi), Some(hj)) => {
                    let d: f64 = weights
                        .iter()
                        .zip(hi.iter().zip(hj))
                        .map(|(w, (p, q))| w * (p[0] - q[0]).hypot(p[1] - q[1]))
                        .sum();
                    (-d / wsum).exp().max(f64::MIN_POSITIVE)
                }
                _ => far,
            };
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let mut l: Vec<f64> = a.iter().map(|v| -v).collect();
    for i in 0..n {
        // off-diagonal sum only: the self-affinity cancels on the diagonal
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| a[i * n + j]).sum();
        l[i * n + i] = off;
    }
    Ok(InteractionLaplacian {
        n,
        a,
        l,
        lambda_decay,
        imputed: histories.iter().any(Option::is_none),
    })
}
