use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::{index::sample as sample_indices, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::projection::project_gradient;
use super::{norm, TrainerConfig, TrainerError};
use crate::data::TrajectorySample;
use crate::predictor::{sgd_step, Predictor};
use crate::{rng, Result};

/// A model trainable from a flat parameter vector.
pub trait GradientModel: Sync {
    type Sample: Sync;

    fn num_params(&self) -> usize;

    /// Mean loss over `batch`.
    fn loss(&self, theta: &[f64], batch: &[&Self::Sample]) -> Result<f64>;

    /// Mean loss and its gradient over `batch`.
    fn loss_gradient(&self, theta: &[f64], batch: &[&Self::Sample]) -> Result<(f64, Vec<f64>)>;
}

impl GradientModel for Predictor {
    type Sample = TrajectorySample;

    fn num_params(&self) -> usize {
        Predictor::num_params(self)
    }

    fn loss(&self, theta: &[f64], batch: &[&TrajectorySample]) -> Result<f64> {
        self.nll_loss(theta, batch)
    }

    fn loss_gradient(&self, theta: &[f64], batch: &[&TrajectorySample]) -> Result<(f64, Vec<f64>)> {
        Predictor::loss_gradient(self, theta, batch)
    }
}

/// Mean loss of each past task over its whole allocated pool.
pub fn previous_losses<M: GradientModel>(
    model: &M,
    theta: &[f64],
    pools: &BTreeMap<u32, Vec<&M::Sample>>,
) -> Result<BTreeMap<u32, f64>> {
    pools
        .iter()
        .map(|(&r, pool)| {
            if pool.is_empty() {
                return Err(TrainerError::EmptyBatch(r).into());
            }
            Ok((r, model.loss(theta, pool)?))
        })
        .collect()
}

/// Past-task losses at the start of a scenario (the frozen reference model)
/// and at its end.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLossSet {
    pub reference: BTreeMap<u32, f64>,
    pub final_losses: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub current_loss: f64,
    pub task_losses: BTreeMap<u32, f64>,
    pub violations: usize,
    pub projection_active: bool,
    /// `‖g̃ − g‖`.
    pub projection_delta: f64,
    /// Sample-gradient evaluations spent on this step.
    pub sample_gradients: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
    pub task_losses: TaskLossSet,
    /// Mean current-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainingHistory {
    pub fn projections(&self) -> usize {
        self.steps.iter().filter(|s| s.projection_active).count()
    }

    pub fn sample_gradients(&self) -> usize {
        self.steps.iter().map(|s| s.sample_gradients).sum()
    }
}

/// Per-step CSV log: step, epoch, current loss, one column per past task,
/// violations, projection flag and `‖g̃ − g‖`.
pub fn write_history_csv<W: Write>(writer: W, history: &TrainingHistory) -> Result<()> {
    let tasks: Vec<u32> = history.task_losses.reference.keys().copied().collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["step".to_string(), "epoch".into(), "current_loss".into()];
    header.extend(tasks.iter().map(|r| format!("loss_{r}")));
    header.extend(["violations".into(), "projection_active".into(), "projection_delta".into()]);
    let io = |e: csv::Error| crate::data::DataError::Csv(e);
    w.write_record(&header).map_err(io)?;
    for s in &history.steps {
        let mut row = vec![s.step.to_string(), s.epoch.to_string(), s.current_loss.to_string()];
        row.extend(tasks.iter().map(|r| s.task_losses.get(r).map_or(String::new(), f64::to_string)));
        row.extend([
            s.violations.to_string(),
            s.projection_active.to_string(),
            s.projection_delta.to_string(),
        ]);
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| crate::Error::io("history.csv", e))?;
    Ok(())
}

/// Train on one scenario's data with gradient projection against each past
/// task's memory pool.
///
/// Every step the current batch gradient `g` and one gradient per past task
/// (on `min(|pool|, batch_size)` samples drawn afresh, or on the whole pool
/// with `full_memory_batches`) are computed; `g` is projected and an SGD step
/// taken with the result. With no pools this is plain minibatch SGD.
pub fn train_scenario<M: GradientModel>(
    model: &M,
    theta: Vec<f64>,
    current: &[&M::Sample],
    pools: &BTreeMap<u32, Vec<&M::Sample>>,
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<(Vec<f64>, TrainingHistory)> {
    cfg.validate()?;
    if theta.len() != model.num_params() {
        return Err(TrainerError::ShapeMismatch(format!(
            "theta has {} entries, model expects {}",
            theta.len(),
            model.num_params()
        ))
        .into());
    }
    let mut theta = theta;
    let mut history = TrainingHistory::default();
    history.task_losses.reference = previous_losses(model, &theta, pools)?;
    if current.is_empty() {
        history.task_losses.final_losses = history.task_losses.reference.clone();
        return Ok((theta, history));
    }
    let mut order: Vec<usize> = (0..current.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, epoch as u64 + 1));
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&M::Sample> = chunk.iter().map(|&i| current[i]).collect();
            let (loss, g) = model.loss_gradient(&theta, &batch)?;
            let step_seed = rng::derive_seed(seed, step as u64);
            let past: Vec<(u32, f64, Vec<f64>, usize)> = pools
                .par_iter()
                .map(|(&r, pool)| {
                    let mem: Vec<&M::Sample> = if cfg.full_memory_batches || pool.len() <= cfg.batch_size {
                        pool.clone()
                    } else {
                        let mut idx =
                            sample_indices(&mut rng::stream(step_seed, u64::from(r)), pool.len(), cfg.batch_size)
                                .into_vec();
                        idx.sort_unstable();
                        idx.into_iter().map(|i| pool[i]).collect()
                    };
                    let (l, gr) = model.loss_gradient(&theta, &mem)?;
                    Ok((r, l, gr, mem.len()))
                })
                .collect::<Result<_>>()?;
            let rows: Vec<Vec<f64>> = past.iter().map(|p| p.2.clone()).collect();
            let proj = project_gradient(&g, &rows, cfg.gamma, cfg.eps_feas, cfg.qp_tol, cfg.qp_max_iter)?;
            let delta = if proj.active {
                norm(&proj.g_tilde.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>())
            } else {
                0.0
            };
            let mut update = proj.g_tilde;
            if cfg.clip_norm > 0.0 {
                let n = norm(&update);
                if n > cfg.clip_norm {
                    let s = cfg.clip_norm / n;
                    update.iter_mut().for_each(|u| *u *= s);
                }
            }
            theta = sgd_step(&theta, &update, cfg.lr)?;
            history.steps.push(StepRecord {
                step,
                epoch,
                current_loss: loss,
                task_losses: past.iter().map(|p| (p.0, p.1)).collect(),
                violations: proj.violations_before.len(),
                projection_active: proj.active,
                projection_delta: delta,
                sample_gradients: batch.len() + past.iter().map(|p| p.3).sum::<usize>(),
            });
            epoch_loss += loss;
            n_batches += 1;
            step += 1;
        }
        history.epoch_losses.push(epoch_loss / n_batches as f64);
    }
    history.task_losses.final_losses = previous_losses(model, &theta, pools)?;
    Ok((theta, history))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Per-sample loss `½ (w·θ − y)²`.
    pub(crate) struct LinearModel {
        pub dim: usize,
    }

    #[derive(Debug, Clone)]
    pub(crate) struct Obs {
        pub w: Vec<f64>,
        pub y: f64,
    }

    impl GradientModel for LinearModel {
        type Sample = Obs;

        fn num_params(&self) -> usize {
            self.dim
        }

        fn loss(&self, theta: &[f64], batch: &[&Obs]) -> Result<f64> {
            Ok(self.loss_gradient(theta, batch)?.0)
        }

        fn loss_gradient(&self, theta: &[f64], batch: &[&Obs]) -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; self.dim];
            let mut l = 0.0;
            for o in batch {
                let r: f64 = o.w.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() - o.y;
                l += 0.5 * r * r;
                for (gi, wi) in g.iter_mut().zip(&o.w) {
                    *gi += r * wi;
                }
            }
            let n = batch.len() as f64;
            g.iter_mut().for_each(|x| *x /= n);
            Ok((l / n, g))
        }
    }

    fn cfg(lr: f64, epochs: usize, gamma: f64) -> TrainerConfig {
        TrainerConfig {
            lr,
            epochs,
            batch_size: 4,
            gamma,
            ..TrainerConfig::default()
        }
    }

    fn task(w: [f64; 2], y: f64, n: usize) -> Vec<Obs> {
        vec![Obs { w: w.to_vec(), y }; n]
    }

    #[test]
    fn previous_losses_average_per_sample_values() {
        let m = LinearModel { dim: 2 };
        let a = Obs { w: vec![1.0, 0.0], y: 2.0 };
        let b = Obs { w: vec![0.0, 1.0], y: -1.0 };
        let theta = [0.5, 0.5];
        let pools = BTreeMap::from([(1, vec![&a, &b]), (2, vec![&a, &b])]);
        let got = previous_losses(&m, &theta, &pools).unwrap();
        // ½(0.5−2)² = 1.125 and ½(0.5+1)² = 1.125
        assert_eq!(got[&1], (1.125 + 1.125) / 2.0);
        assert_eq!(got[&1], got[&2]);
        let empty = BTreeMap::from([(3, Vec::<&Obs>::new())]);
        assert!(previous_losses(&m, &theta, &empty).is_err());
    }

    #[test]
    fn without_memory_it_is_plain_sgd() {
        let m = LinearModel { dim: 2 };
        let data = [task([1.0, 0.5], 1.0, 5), task([0.2, 1.0], -1.0, 6)].concat();
        let refs: Vec<&Obs> = data.iter().collect();
        let c = cfg(0.1, 3, 0.0);
        let (theta, hist) = train_scenario(&m, vec![0.0, 0.0], &refs, &BTreeMap::new(), &c, 9).unwrap();
        // replay the same shuffles by hand
        let mut t = vec![0.0, 0.0];
        let mut order: Vec<usize> = (0..refs.len()).collect();
        for epoch in 0..3 {
            order.shuffle(&mut rng::stream(9, epoch + 1));
            for chunk in order.chunks(4) {
                let b: Vec<&Obs> = chunk.iter().map(|&i| refs[i]).collect();
                let (_, g) = m.loss_gradient(&t, &b).unwrap();
                t = t.iter().zip(&g).map(|(a, g)| a - 0.1 * g).collect();
            }
        }
        assert_eq!(theta, t);
        assert_eq!(hist.projections(), 0);
    }

    #[test]
    fn memory_equal_to_current_never_projects() {
        let m = LinearModel { dim: 2 };
        let one = task([1.0, 2.0], 3.0, 1);
        let refs: Vec<&Obs> = one.iter().collect();
        let pools = BTreeMap::from([(0, refs.clone())]);
        let (_, hist) = train_scenario(&m, vec![0.0, 0.0], &refs, &pools, &cfg(0.05, 20, 0.0), 1).unwrap();
        assert_eq!(hist.projections(), 0);
    }

    #[test]
    fn projection_protects_the_past_task() {
        let m = LinearModel { dim: 2 };
        // task 1 wants θ₀ = 1; task 2 wants θ₀ + θ₁ = −1
        let t1 = task([1.0, 0.0], 1.0, 8);
        let t2 = task([1.0, 1.0], -1.0, 8);
        let r1: Vec<&Obs> = t1.iter().collect();
        let r2: Vec<&Obs> = t2.iter().collect();
        let start = vec![1.0, 0.0];
        let c = cfg(0.01, 500, 0.0);
        let pools = BTreeMap::from([(1, r1.clone())]);
        let (gem, hist) = train_scenario(&m, start.clone(), &r2, &pools, &c, 3).unwrap();
        let (sgd, _) = train_scenario(&m, start.clone(), &r2, &BTreeMap::new(), &c, 3).unwrap();
        let reference = m.loss(&start, &r1).unwrap();
        assert_eq!(reference, 0.0);
        assert!(m.loss(&gem, &r1).unwrap() <= reference + 1e-3);
        assert!(m.loss(&sgd, &r1).unwrap() > reference + 1e-3);
        assert!(m.loss(&gem, &r2).unwrap() < 1e-3);
        assert!(hist.projections() > 0);
    }

    #[test]
    fn one_projected_step_keeps_past_losses_to_second_order() {
        let m = LinearModel { dim: 3 };
        let mut r = rng::rng_from(2);
        use rand::Rng as _;
        for _ in 0..200 {
            let mut obs = || Obs {
                w: (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
                y: r.random_range(-1.0..1.0),
            };
            let past: Vec<Vec<Obs>> = (0..3).map(|_| vec![obs(), obs()]).collect();
            let cur = [obs(), obs()];
            let theta: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let pools: BTreeMap<u32, Vec<&Obs>> = past.iter().enumerate().map(|(i, p)| (i as u32, p.iter().collect())).collect();
            let cur_refs: Vec<&Obs> = cur.iter().collect();
            let lr = 1e-3;
            let c = TrainerConfig { lr, epochs: 1, batch_size: 8, gamma: 0.0, ..TrainerConfig::default() };
            let before = previous_losses(&m, &theta, &pools).unwrap();
            let (after_theta, hist) = train_scenario(&m, theta.clone(), &cur_refs, &pools, &c, 0).unwrap();
            let after = previous_losses(&m, &after_theta, &pools).unwrap();
            let step_len = norm(&after_theta.iter().zip(&theta).map(|(a, b)| a - b).collect::<Vec<_>>());
            for (k, b) in &before {
                // curvature of each task loss is at most max ‖w‖² ≤ 3
                assert!(after[k] <= b + 1.5 * step_len * step_len + 1e-12, "{step_len} {hist:?}");
            }
        }
    }

    #[test]
    fn history_csv_has_one_column_per_task() {
        let m = LinearModel { dim: 2 };
        let t1 = task([1.0, 0.0], 1.0, 4);
        let t2 = task([0.0, 1.0], 1.0, 4);
        let pools = BTreeMap::from([(7, t1.iter().collect::<Vec<_>>())]);
        let (_, hist) = train_scenario(&m, vec![0.0, 0.0], &t2.iter().collect::<Vec<_>>(), &pools, &cfg(0.1, 2, 0.0), 0).unwrap();
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &hist).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,epoch,current_loss,loss_7,violations,projection_active,projection_delta"
        );
        assert_eq!(lines.count(), hist.steps.len());
    }
}
