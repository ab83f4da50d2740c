use std::cmp::Ordering;

use super::{DivergenceError, InteractionLaplacian};

/// Eigen-decomposition of a symmetric row-major `n × n` matrix by cyclic
/// Jacobi rotations.
///
/// Returns eigenvalues ascending and the matching unit eigenvectors. Each
/// vector is sign-canonical: its first component of largest magnitude is
/// positive. Eigenvalues equal up to roundoff are ordered by lexicographic
/// comparison of their vectors.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * frob || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut vec: Vec<f64> = (0..n).map(|i| v[i * n + j]).collect();
            canonical_sign(&mut vec);
            (a[j * n + j], vec)
        })
        .collect();
    let tie = 1e-12 * frob.max(f64::MIN_POSITIVE);
    pairs.sort_by(|x, y| {
        if (x.0 - y.0).abs() <= tie {
            lexicographic(&x.1, &y.1)
        } else {
            x.0.total_cmp(&y.0)
        }
    });
    pairs.into_iter().unzip()
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Normalize to unit length and flip so the first component of largest
/// magnitude is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenvectors of the `k` smallest eigenvalues of `L`, ascending.
pub fn spectral_features(lap: &InteractionLaplacian, k: usize) -> Result<Vec<Vec<f64>>, DivergenceError> {
    if k > lap.n {
        return Err(DivergenceError::KTooLarge { k, n: lap.n });
    }
    let (_, vectors) = symmetric_eigen(&lap.l, lap.n);
    Ok(vectors.into_iter().take(k).collect())
}
