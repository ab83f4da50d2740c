//! Dual of the gradient projection QP:
//! `min ½ vᵀ Q v + bᵀ v  s.t. v ≥ 0`, with `Q = G Gᵀ` and `b = G g`.

use serde::{Deserialize, Serialize};

use super::TrainerError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub v: Vec<f64>,
    /// Scaled natural residual `max_i |min(v_i, (Qv + b)_i)|`.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// `max_i |min(v_i, (Qv + b)_i)| / scale`, where scale covers the size of
/// `Q` and `b` so the tolerance is unit-free.
fn residual(q: &[Vec<f64>], b: &[f64], v: &[f64], scale: f64) -> f64 {
    let mut r = 0.0f64;
    for i in 0..v.len() {
        let grad = b[i] + q[i].iter().zip(v).map(|(a, x)| a * x).sum::<f64>();
        r = r.max(v[i].min(grad).abs());
    }
    r / scale
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    let size = a.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * size {
            return None;
        }
        a.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (top, bottom) = a.split_at_mut(row);
            for (x, p) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *x -= f * p;
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (rhs[i] - s) / a[i][i];
    }
    Some(x)
}

/// Re-solve the equality system on the support of `v`; keep the result when
/// it is feasible and has a smaller residual.
fn polish(q: &[Vec<f64>], b: &[f64], v: &mut [f64], scale: f64) {
    let support: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0).collect();
    if support.is_empty() {
        return;
    }
    let a = support.iter().map(|&i| support.iter().map(|&j| q[i][j]).collect()).collect();
    let rhs = support.iter().map(|&i| -b[i]).collect();
    let Some(x) = solve_dense(a, rhs) else { return };
    if x.iter().any(|&xi| xi < 0.0 || !xi.is_finite()) {
        return;
    }
    let mut cand = vec![0.0; v.len()];
    for (&i, xi) in support.iter().zip(x) {
        cand[i] = xi;
    }
    if residual(q, b, &cand, scale) <= residual(q, b, v, scale) {
        v.copy_from_slice(&cand);
    }
}

/// Projected coordinate descent on the dual (each coordinate step is an exact
/// minimization, i.e. diagonally preconditioned projected gradient), followed
/// by an active-set polish. Stops once the scaled KKT residual is `≤ tol`.
///
/// On non-convergence the best iterate is returned inside
/// [`TrainerError::MaxIterations`].
pub fn qp_solve_dual(q: &[Vec<f64>], b: &[f64], tol: f64, max_iter: usize) -> Result<DualSolution, TrainerError> {
    let n = b.len();
    if q.len() != n || q.iter().any(|r| r.len() != n) {
        return Err(TrainerError::ShapeMismatch(format!("Q must be {n}x{n}")));
    }
    if q.iter().flatten().chain(b).any(|x| !x.is_finite()) {
        return Err(TrainerError::NonFiniteInput);
    }
    let scale = q
        .iter()
        .enumerate()
        .map(|(i, r)| r[i].abs())
        .chain(b.iter().map(|x| x.abs()))
        .fold(1.0f64, f64::max);
    let mut v = vec![0.0; n];
    let mut iterations = 0;
    let mut r = residual(q, b, &v, scale);
    while r > tol && iterations < max_iter {
        for i in 0..n {
            if q[i][i] <= 0.0 {
                continue;
            }
            let grad = b[i] + q[i].iter().zip(&v).map(|(a, x)| a * x).sum::<f64>();
            v[i] = (v[i] - grad / q[i][i]).max(0.0);
        }
        iterations += 1;
        polish(q, b, &mut v, scale);
        r = residual(q, b, &v, scale);
    }
    if r > tol {
        return Err(TrainerError::MaxIterations { residual: r, best: v });
    }
    Ok(DualSolution {
        v,
        kkt_residual: r,
        iterations,
    })
}
