//! Flat parameter vectors and dense layers with hand-written backprop.
//!
//! All trainable weights of a model live in one `Vec<f64>`. A [`Layout`]
//! maps named segments of it onto dense layers, each stored as a row-major
//! weight matrix `W[n_out][n_in]` followed by its bias.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
    /// Index of the first weight in the flat vector.
    pub offset: usize,
}

impl Dense {
    pub fn len(&self) -> usize {
        self.n_out * (self.n_in + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.n_out * self.n_in
    }

    /// `out = W x + b`.
    pub fn forward(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        debug_assert_eq!(out.len(), self.n_out);
        let w = &theta[self.offset..self.bias_offset()];
        let b = &theta[self.bias_offset()..self.offset + self.len()];
        for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(self.n_in).zip(b)) {
            *o = bias + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    /// Accumulate parameter gradients for upstream gradient `dout` at input
    /// `x`; when `dx` is given, add `Wᵀ dout` into it.
    pub fn backward(
        &self,
        theta: &[f64],
        x: &[f64],
        dout: &[f64],
        grad: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let (gw, gb) = grad[self.offset..self.offset + self.len()].split_at_mut(self.n_out * self.n_in);
        for ((grow, gbias), d) in gw.chunks_exact_mut(self.n_in).zip(gb.iter_mut()).zip(dout) {
            *gbias += d;
            if *d != 0.0 {
                for (g, xi) in grow.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        if let Some(dx) = dx {
            let w = &theta[self.offset..self.bias_offset()];
            for (row, d) in w.chunks_exact(self.n_in).zip(dout) {
                for (dxi, wi) in dx.iter_mut().zip(row) {
                    *dxi += d * wi;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<Dense>,
}

impl Layout {
    /// Pack layers `(name, n_in, n_out)` back to back.
    pub fn new(specs: &[(&str, usize, usize)]) -> Self {
        let mut offset = 0;
        let layers = specs
            .iter()
            .map(|&(name, n_in, n_out)| {
                let d = Dense {
                    name: name.to_string(),
                    n_in,
                    n_out,
                    offset,
                };
                offset += d.len();
                d
            })
            .collect();
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, name: &str) -> Option<&Dense> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, 0x1417);
        let mut theta = vec![0.0; self.len()];
        for l in &self.layers {
            let a = (6.0 / (l.n_in + l.n_out) as f64).sqrt();
            for w in &mut theta[l.offset..l.offset + l.n_out * l.n_in] {
                *w = rng.random_range(-a..=a);
            }
        }
        theta
    }

    /// Zero the weights and bias of one layer.
    pub fn zero_layer(&self, theta: &mut [f64], name: &str) {
        if let Some(l) = self.layer(name) {
            theta[l.offset..l.offset + l.len()].fill(0.0);
        }
    }
}

pub fn tanh_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

/// Multiply `dy` by the tanh derivative evaluated from the output `y`.
pub fn tanh_backward(y: &[f64], dy: &mut [f64]) {
    for (d, y) in dy.iter_mut().zip(y) {
        *d *= 1.0 - y * y;
    }
}

/// Numerically stable `log Σ exp(x_i)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Batches above this size are split into a fixed number of shards whose
/// partial results are returned in order.
const SHARDS: usize = 8;

/// Apply `f` to fixed contiguous shards of `batch` in parallel and return the
/// results in shard order. Shard boundaries depend only on the batch length.
pub fn reduce_shards<T, R, F>(batch: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync,
{
    let size = batch.len().div_ceil(SHARDS).max(1);
    if batch.len() <= SHARDS {
        return vec![f(batch)];
    }
    batch.par_chunks(size).map(&f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_packs_layers_back_to_back() {
        let l = Layout::new(&[("a", 3, 2), ("b", 2, 4)]);
        assert_eq!(l.layers[0].len(), 8);
        assert_eq!(l.layers[1].offset, 8);
        assert_eq!(l.len(), 8 + 12);
    }

    #[test]
    fn dense_forward_matches_matrix_product() {
        let l = Layout::new(&[("a", 2, 2)]);
        // W = [[1, 2], [3, 4]], b = [0.5, -1]
        let theta = [1.0, 2.0, 3.0, 4.0, 0.5, -1.0];
        let mut out = [0.0; 2];
        l.layers[0].forward(&theta, &[1.0, -1.0], &mut out);
        assert_eq!(out, [-0.5, -2.0]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let l = Layout::new(&[("a", 3, 2)]);
        let theta = l.init(1);
        let x = [0.3, -0.7, 1.1];
        let dout = [0.4, -1.3];
        let f = |t: &[f64], x: &[f64]| {
            let mut out = [0.0; 2];
            l.layers[0].forward(t, x, &mut out);
            out[0] * dout[0] + out[1] * dout[1]
        };
        let mut grad = vec![0.0; l.len()];
        let mut dx = vec![0.0; 3];
        l.layers[0].backward(&theta, &x, &dout, &mut grad, Some(&mut dx));
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[i] += h;
            m[i] -= h;
            assert!(((f(&p, &x) - f(&m, &x)) / (2.0 * h) - grad[i]).abs() < 1e-8);
        }
        for i in 0..3 {
            let mut p = x;
            let mut m = x;
            p[i] += h;
            m[i] -= h;
            assert!(((f(&theta, &p) - f(&theta, &m)) / (2.0 * h) - dx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let l = Layout::new(&[("a", 10, 6)]);
        let theta = l.init(3);
        let a = (6.0f64 / 16.0).sqrt();
        assert!(theta[..60].iter().all(|w| w.abs() <= a));
        assert!(theta[60..].iter().all(|b| *b == 0.0));
        assert_eq!(theta, l.init(3));
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let s = softmax(&[1.0, 2.0, 3.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
