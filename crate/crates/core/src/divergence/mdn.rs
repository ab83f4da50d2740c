//! Mixture density network: condition → diagonal Gaussian mixture.
//!
//! Inputs and outputs are standardized with statistics of the training cases.
//! [`MdnModel::mixture_at`] maps the mixture back to original units, so
//! densities from two models fitted on different data are comparable.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DivergenceCase, DivergenceError, GaussianMixture};
use crate::nn::{log_sum_exp, reduce_shards, softmax, tanh_backward, tanh_inplace, Adam, Layout};
use crate::rng;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;
/// Log-variance head outputs are capped here (no gradient above).
const MAX_LOG_VAR: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdnConfig {
    /// Mixture components.
    pub k: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Lower bound on every component variance, in squared output units.
    pub variance_floor: f64,
    /// Fitting needs at least `min_cases_per_component · k` cases.
    pub min_cases_per_component: usize,
    pub seed: u64,
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self {
            k: 20,
            hidden: 64,
            epochs: 60,
            lr: 1e-3,
            batch_size: 128,
            variance_floor: 1e-4,
            min_cases_per_component: 300,
            seed: 0,
        }
    }
}

impl MdnConfig {
    pub fn min_cases(&self) -> usize {
        self.min_cases_per_component * self.k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnModel {
    pub config: MdnConfig,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layout: Layout,
    pub theta: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
    /// Mean training NLL per epoch (standardized units).
    pub epoch_losses: Vec<f64>,
}

fn moments(rows: impl Iterator<Item = Vec<f64>> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
        mean.iter_mut().zip(&r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-9 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

struct Pass {
    x: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    means: Vec<f64>,
    log_var: Vec<f64>,
}

impl MdnModel {
    /// Untrained model whose standardization comes from `cases`.
    pub fn new(config: MdnConfig, cases: &[DivergenceCase]) -> Result<Self, DivergenceError> {
        let first = cases
            .first()
            .ok_or(DivergenceError::InsufficientData {
                required: config.min_cases().max(1),
                available: 0,
            })?;
        let (input_dim, output_dim) = (first.condition.len(), first.future.len());
        if let Some(c) = cases
            .iter()
            .find(|c| c.condition.len() != input_dim || c.future.len() != output_dim)
        {
            return Err(DivergenceError::DimensionMismatch {
                left: input_dim + output_dim,
                right: c.condition.len() + c.future.len(),
            });
        }
        let (x_mean, x_std) = moments(cases.iter().map(|c| c.condition.clone()), input_dim);
        let (y_mean, y_std) = moments(cases.iter().map(|c| c.future.clone()), output_dim);
        let (k, h) = (config.k, config.hidden);
        let layout = Layout::new(&[
            ("hidden", input_dim, h),
            ("logits", h, k),
            ("means", h, k * output_dim),
            ("log_var", h, k * output_dim),
        ]);
        let theta = layout.init(config.seed);
        Ok(Self {
            config,
            input_dim,
            output_dim,
            layout,
            theta,
            x_mean,
            x_std,
            y_mean,
            y_std,
            epoch_losses: Vec::new(),
        })
    }

    fn standardize(&self, c: &DivergenceCase) -> (Vec<f64>, Vec<f64>) {
        let x = c
            .condition
            .iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let y = c
            .future
            .iter()
            .zip(self.y_mean.iter().zip(&self.y_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        (x, y)
    }

    fn layer(&self, name: &str) -> &crate::nn::Dense {
        self.layout.layer(name).expect("layer exists by construction")
    }

    fn pass(&self, theta: &[f64], x: Vec<f64>) -> Pass {
        let mut hidden = vec![0.0; self.config.hidden];
        self.layer("hidden").forward(theta, &x, &mut hidden);
        tanh_inplace(&mut hidden);
        let out = |name: &str| {
            let l = self.layer(name);
            let mut o = vec![0.0; l.n_out];
            l.forward(theta, &hidden, &mut o);
            o
        };
        let (logits, means, log_var) = (out("logits"), out("means"), out("log_var"));
        Pass {
            x,
            hidden,
            logits,
            means,
            log_var,
        }
    }

    /// Standardized-space component variances.
    fn variances(&self, log_var: &[f64]) -> Vec<f64> {
        let d = self.output_dim;
        log_var
            .iter()
            .enumerate()
            .map(|(i, lv)| self.config.variance_floor / (self.y_std[i % d] * self.y_std[i % d]) + lv.min(MAX_LOG_VAR).exp())
            .collect()
    }

    /// NLL of one standardized case; adds its gradient into `grad` when given.
    #[allow(clippy::needless_range_loop)]
    fn case_nll(&self, theta: &[f64], x: Vec<f64>, y: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (k, d) = (self.config.k, self.output_dim);
        let p = self.pass(theta, x);
        let var = self.variances(&p.log_var);
        let log_w = {
            let lse = log_sum_exp(&p.logits);
            p.logits.iter().map(|l| l - lse).collect::<Vec<_>>()
        };
        let comp: Vec<f64> = (0..k)
            .map(|c| {
                let q: f64 = (0..d)
                    .map(|j| {
                        let i = c * d + j;
                        let r = y[j] - p.means[i];
                        LOG_2PI + var[i].ln() + r * r / var[i]
                    })
                    .sum();
                log_w[c] - 0.5 * q
            })
            .collect();
        let lse = log_sum_exp(&comp);
        let Some(grad) = grad else {
            return -lse;
        };

        let resp: Vec<f64> = comp.iter().map(|v| (v - lse).exp()).collect();
        let weights = softmax(&p.logits);
        let dlogits: Vec<f64> = weights.iter().zip(&resp).map(|(w, g)| w - g).collect();
        let mut dmeans = vec![0.0; k * d];
        let mut dlog_var = vec![0.0; k * d];
        for c in 0..k {
            for j in 0..d {
                let i = c * d + j;
                let r = y[j] - p.means[i];
                dmeans[i] = -resp[c] * r / var[i];
                if p.log_var[i] < MAX_LOG_VAR {
                    let dvar = resp[c] * 0.5 * (1.0 / var[i] - r * r / (var[i] * var[i]));
                    dlog_var[i] = dvar * p.log_var[i].exp();
                }
            }
        }
        let mut dhidden = vec![0.0; self.config.hidden];
        for (name, dout) in [("logits", &dlogits), ("means", &dmeans), ("log_var", &dlog_var)] {
            self.layer(name).backward(theta, &p.hidden, dout, grad, Some(&mut dhidden));
        }
        tanh_backward(&p.hidden, &mut dhidden);
        self.layer("hidden").backward(theta, &p.x, &dhidden, grad, None);
        -lse
    }

    fn check_case(&self, c: &DivergenceCase) -> Result<(), DivergenceError> {
        if c.condition.len() != self.input_dim || c.future.len() != self.output_dim {
            return Err(DivergenceError::ShapeMismatch(format!(
                "case of dims ({}, {}), model expects ({}, {})",
                c.condition.len(),
                c.future.len(),
                self.input_dim,
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Mean standardized-space NLL of `cases` at parameters `theta`.
    pub fn nll(&self, theta: &[f64], cases: &[DivergenceCase]) -> Result<f64, DivergenceError> {
        cases.iter().try_for_each(|c| self.check_case(c))?;
        let parts = reduce_shards(cases, |chunk| {
            chunk
                .iter()
                .map(|c| {
                    let (x, y) = self.standardize(c);
                    self.case_nll(theta, x, &y, None)
                })
                .sum::<f64>()
        });
        Ok(parts.into_iter().sum::<f64>() / cases.len().max(1) as f64)
    }

    /// Mean standardized-space NLL and its gradient with respect to `theta`.
    pub fn loss_gradient(&self, theta: &[f64], cases: &[DivergenceCase]) -> Result<(f64, Vec<f64>), DivergenceError> {
        cases.iter().try_for_each(|c| self.check_case(c))?;
        let n = theta.len();
        let parts = reduce_shards(cases, |chunk| {
            let mut g = vec![0.0; n];
            let l: f64 = chunk
                .iter()
                .map(|c| {
                    let (x, y) = self.standardize(c);
                    self.case_nll(theta, x, &y, Some(&mut g))
                })
                .sum();
            (l, g)
        });
        let mut loss = 0.0;
        let mut grad = vec![0.0; n];
        for (l, g) in parts {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let m = cases.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= m);
        Ok((loss / m, grad))
    }

    /// Conditional mixture in original output units.
    pub fn mixture_at(&self, condition: &[f64]) -> Result<GaussianMixture, DivergenceError> {
        if condition.len() != self.input_dim {
            return Err(DivergenceError::ShapeMismatch(format!(
                "condition has {} entries, model expects {}",
                condition.len(),
                self.input_dim
            )));
        }
        let x = condition
            .iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let p = self.pass(&self.theta, x);
        let d = self.output_dim;
        let weights = softmax(&p.logits);
        let means = p
            .means
            .chunks_exact(d)
            .map(|m| m.iter().enumerate().map(|(j, v)| self.y_mean[j] + self.y_std[j] * v).collect())
            .collect();
        let variances = p
            .log_var
            .chunks_exact(d)
            .map(|lv| {
                lv.iter()
                    .enumerate()
                    .map(|(j, v)| self.config.variance_floor + self.y_std[j] * self.y_std[j] * v.min(MAX_LOG_VAR).exp())
                    .collect()
            })
            .collect();
        Ok(GaussianMixture {
            weights,
            means,
            variances,
        })
    }
}

/// Fit an MDN by minibatch Adam on the mixture NLL.
pub fn fit_mdn(cases: &[DivergenceCase], config: &MdnConfig) -> Result<MdnModel, DivergenceError> {
    let required = config.min_cases();
    if cases.len() < required || cases.is_empty() {
        return Err(DivergenceError::InsufficientData {
            required: required.max(1),
            available: cases.len(),
        });
    }
    let mut model = MdnModel::new(config.clone(), cases)?;
    let mut theta = std::mem::take(&mut model.theta);
    let mut adam = Adam::new(theta.len(), config.lr);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let batch = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, epoch as u64 + 1));
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let chunk: Vec<DivergenceCase> = idx.iter().map(|&i| cases[i].clone()).collect();
            let (loss, grad) = model.loss_gradient(&theta, &chunk)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(DivergenceError::NonFiniteLoss { epoch });
            }
            total += loss * idx.len() as f64;
            adam.step(&mut theta, &grad);
        }
        model.epoch_losses.push(total / cases.len() as f64);
    }
    model.theta = theta;
    Ok(model)
}
