use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::nn::{commit_running_stats, BN_MOMENTUM};
use crate::params::{EntryKind, ParamStore};
use crate::tape::{Mode, Tape, Var};

use super::config::Task;
use super::loss::{total_loss, LossConfig};
use super::metrics::{evaluate, Metrics};
use super::model::Model;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 + cos(pi * t / total_steps)) / 2`, clamped at the end.
    Cosine { total_steps: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule: LrSchedule::Constant }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { total_steps } if total_steps > 0 => {
                let t = step.min(total_steps) as f64 / total_steps as f64;
                self.lr * 0.5 * (1.0 + (PI * t).cos())
            }
            LrSchedule::Cosine { .. } => self.lr,
        }
    }
}

/// Parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub step: u64,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

/// Random stream for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

impl TrainState {
    pub fn new(params: ParamStore, optimizer: AdamConfig, seed: u64) -> Self {
        Self { params, step: 0, optimizer, seed }
    }

    /// One forward/backward/Adam step. Returns the loss before the update.
    ///
    /// A non-finite loss or gradient leaves the state untouched.
    pub fn train_step(&mut self, loss_fn: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new(&self.params, Mode::Train, step_rng(self.seed, self.step));
        let out = loss_fn(&mut tape)?;
        let loss = tape.value(out).data()[0];
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.step, loss });
        }
        let grads = tape.backward(out)?;
        let (grads, stats) = tape.into_param_grads(&grads)?;
        self.params.zero_grads();
        for (name, g) in grads {
            self.params.get_mut(&name)?.grad.add_assign(&g);
        }
        let o = self.optimizer;
        let lr = o.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let (c1, c2) = (1.0 - o.beta1.powi(t), 1.0 - o.beta2.powi(t));
        for (_, e) in self.params.iter_mut() {
            if e.kind != EntryKind::Trainable {
                continue;
            }
            let (v, g, m1, m2) = (e.value.data_mut(), e.grad.data(), e.moment1.data_mut(), e.moment2.data_mut());
            for i in 0..v.len() {
                m1[i] = o.beta1 * m1[i] + (1.0 - o.beta1) * g[i];
                m2[i] = o.beta2 * m2[i] + (1.0 - o.beta2) * g[i] * g[i];
                v[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + o.eps);
            }
        }
        commit_running_stats(&mut self.params, &stats, BN_MOMENTUM)?;
        self.step += 1;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub eval_batch_size: usize,
    /// Stop after the first epoch whose test metric reaches this value.
    pub target: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, augment: true, eval_batch_size: 32, target: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test: Option<Metrics>,
}

impl EpochLog {
    /// Accuracy for classification, mIoU for segmentation.
    pub fn test_metric(&self, task: Task) -> Option<f64> {
        self.test.as_ref().map(|m| match task {
            Task::Classification => m.overall_accuracy,
            Task::Segmentation => m.miou,
        })
    }
}

/// Labels of a batch: one per cloud (classification) or one per point.
pub fn batch_labels(task: Task, samples: &[&Sample]) -> Result<Vec<usize>> {
    match task {
        Task::Classification => Ok(samples.iter().map(|s| s.label).collect()),
        Task::Segmentation => {
            let mut out = Vec::new();
            for s in samples {
                let l = s
                    .cloud
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Parameter("segmentation sample without point labels".into()))?;
                out.extend_from_slice(l);
            }
            Ok(out)
        }
    }
}

/// Mini-batch loss of `model` on `samples`.
pub fn batch_loss(tape: &mut Tape, model: &Model, samples: &[&Sample], loss: &LossConfig) -> Result<Var> {
    let clouds: Vec<_> = samples.iter().map(|s| &s.cloud).collect();
    let out = model.forward(tape, &clouds, false)?;
    let labels = batch_labels(model.config().task, samples)?;
    Ok(total_loss(tape, &out, &labels, loss)?.total)
}

/// Trains for `cfg.epochs` epochs, evaluating on `test` (if non-empty) after each one.
///
/// Stops early once `on_epoch` returns true or the configured target is reached.
pub fn fit(
    model: &Model,
    state: &mut TrainState,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> bool,
) -> Result<Vec<EpochLog>> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2 for batch-norm".into()));
    }
    loss.validate()?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = step_rng(state.seed, (1 << 40) + epoch as u64);
        order.shuffle(&mut rng);
        let (mut acc, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Sample> = if cfg.augment {
                chunk.iter().map(|&i| augment(&train[i], &mut rng)).collect()
            } else {
                chunk.iter().map(|&i| train[i].clone()).collect()
            };
            let refs: Vec<&Sample> = batch.iter().collect();
            acc += state.train_step(|tape| batch_loss(tape, model, &refs, loss))?;
            count += 1;
        }
        let test_metrics = if test.is_empty() {
            None
        } else {
            Some(evaluate(model, &state.params, test, cfg.eval_batch_size, state.seed)?)
        };
        let log = EpochLog { epoch: epoch + 1, train_loss: acc / count.max(1) as f64, test: test_metrics };
        let stop = on_epoch(&log);
        let reached = matches!((cfg.target, log.test_metric(model.config().task)), (Some(t), Some(m)) if m >= t);
        logs.push(log);
        if stop || reached {
            break;
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic_state(lr: f64) -> TrainState {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[1], vec![3.0]).unwrap(), EntryKind::Trainable).unwrap();
        TrainState::new(store, AdamConfig { lr, ..AdamConfig::default() }, 7)
    }

    fn quadratic(tape: &mut Tape) -> Result<Var> {
        let x = tape.param("x")?;
        let c = tape.constant(Tensor::new(&[1], vec![1.5]).unwrap());
        let d = tape.sub(x, c)?;
        Ok(tape.sum_squares(d))
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut s = quadratic_state(0.0);
        for _ in 0..5 {
            s.train_step(quadratic).unwrap();
        }
        assert_eq!(s.params.value("x").unwrap().data(), &[3.0]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn quadratic_converges() {
        let mut s = quadratic_state(1e-2);
        for _ in 0..500 {
            s.train_step(quadratic).unwrap();
        }
        let x = s.params.value("x").unwrap().data()[0];
        assert!((x - 1.5).abs() < 1e-2, "x = {x}");
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = quadratic_state(0.1);
        let loss = s.train_step(quadratic).unwrap();
        assert!((loss - 2.25).abs() < 1e-15);
        let x = s.params.value("x").unwrap().data()[0];
        assert!((x - 2.9).abs() < 1e-6);
    }

    #[test]
    fn divergence_leaves_state() {
        let mut s = quadratic_state(0.1);
        let before = s.clone();
        let err = s
            .train_step(|tape| {
                let v = quadratic(tape)?;
                Ok(tape.scale(v, f64::INFINITY))
            })
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
        assert_eq!(s, before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let o = AdamConfig { schedule: LrSchedule::Cosine { total_steps: 10 }, ..AdamConfig::default() };
        assert!((o.lr_at(0) - 1e-3).abs() < 1e-18);
        assert!((o.lr_at(5) - 5e-4).abs() < 1e-15);
        assert!(o.lr_at(10).abs() < 1e-18);
        assert!(o.lr_at(20).abs() < 1e-18);
    }
}
