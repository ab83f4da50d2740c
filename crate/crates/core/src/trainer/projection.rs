use serde::{Deserialize, Serialize};

use super::qp::{qp_solve_dual, DualSolution};
use super::{dot, TrainerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub g_tilde: Vec<f64>,
    /// Whether any constraint was violated and the QP was solved.
    pub active: bool,
    pub violations_before: Vec<usize>,
    pub violations_after: Vec<usize>,
    pub dual: Option<DualSolution>,
}

fn check_shapes(g: &[f64], rows: &[Vec<f64>]) -> Result<(), TrainerError> {
    match rows.iter().position(|r| r.len() != g.len()) {
        Some(i) => Err(TrainerError::ShapeMismatch(format!(
            "constraint {i} has length {}, gradient has {}",
            rows[i].len(),
            g.len()
        ))),
        None => Ok(()),
    }
}

/// Indices `r` with `⟨g, g_r⟩ < 0`. An inner product of exactly zero is
/// feasible.
pub fn gradient_violations(g: &[f64], rows: &[Vec<f64>]) -> Result<Vec<usize>, TrainerError> {
    check_shapes(g, rows)?;
    Ok(rows
        .iter()
        .enumerate()
        .filter(|(_, r)| dot(g, r) < 0.0)
        .map(|(i, _)| i)
        .collect())
}

/// Closest gradient to `g` whose inner product with every row of `G` is
/// nonnegative: `g̃ = Gᵀ(v* + γ1) + g`.
///
/// When nothing is violated, `g` is returned unchanged. If the dual solver
/// hits its iteration cap the best iterate is used and a warning logged;
/// `eps_feas` only decides which constraints are reported as still violated.
pub fn project_gradient(
    g: &[f64],
    rows: &[Vec<f64>],
    gamma: f64,
    eps_feas: f64,
    qp_tol: f64,
    qp_max_iter: usize,
) -> Result<ProjectionResult, TrainerError> {
    let before = gradient_violations(g, rows)?;
    if before.is_empty() {
        return Ok(ProjectionResult {
            g_tilde: g.to_vec(),
            active: false,
            violations_before: before,
            violations_after: Vec::new(),
            dual: None,
        });
    }
    if g.iter().chain(rows.iter().flatten()).any(|x| !x.is_finite()) {
        return Err(TrainerError::NonFiniteInput);
    }
    let q: Vec<Vec<f64>> = rows.iter().map(|a| rows.iter().map(|b| dot(a, b)).collect()).collect();
    let b: Vec<f64> = rows.iter().map(|r| dot(r, g)).collect();
    let dual = match qp_solve_dual(&q, &b, qp_tol, qp_max_iter) {
        Ok(d) => d,
        Err(TrainerError::MaxIterations { residual, best }) => {
            log::warn!("gradient projection stopped at KKT residual {residual:e}");
            DualSolution {
                v: best,
                kkt_residual: residual,
                iterations: qp_max_iter,
            }
        }
        Err(e) => return Err(e),
    };
    let mut g_tilde = g.to_vec();
    for (row, v) in rows.iter().zip(&dual.v) {
        let w = v + gamma;
        if w != 0.0 {
            for (t, r) in g_tilde.iter_mut().zip(row) {
                *t += w * r;
            }
        }
    }
    let after = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| dot(&g_tilde, r) < -eps_feas)
        .map(|(i, _)| i)
        .collect();
    Ok(ProjectionResult {
        g_tilde,
        active: true,
        violations_before: before,
        violations_after: after,
        dual: Some(dual),
    })
}
