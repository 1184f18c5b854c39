//! Finite-difference checks of every learned component and of small end-to-end models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cell::{pl_cell, pnl_cell, Aggregation, PlParams, PnlParams};
use crate::error::Result;
use crate::geom::PointCloud;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::network::loss::{ce_loss_weighted, repulsion_loss, total_loss};
use crate::network::{KernelScale, LayerConfig, LossConfig, Model, ModelConfig, Task};
use crate::nn::{BatchNorm, LinearMap};
use crate::params::{EntryKind, ParamStore};
use crate::sampling::{adaptive_sample, AsParams, SamplingMode, ShiftWeighting};
use crate::tape::{Mode, OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_pair: Option<(f64, f64)>,
    pub checked_entries: usize,
    pub refined_entries: usize,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

fn input(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut impl Rng) -> Result<()> {
    store.insert(name, uniform(shape, rng), EntryKind::Trainable)
}

fn probe(tape: &mut Tape, y: Var, target: &Tensor) -> Result<Var> {
    let r = tape.constant(target.clone());
    let d = tape.sub(y, r)?;
    Ok(tape.sum_squares(d))
}

struct Suite {
    seed: u64,
    h: f64,
    fault: Option<OpKind>,
    results: Vec<ComponentResult>,
}

impl Suite {
    fn check<F>(&mut self, name: &'static str, store: &ParamStore, max_per_param: Option<usize>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape) -> Result<Var>,
    {
        self.check_in(name, store, Mode::Train, max_per_param, true, f)
    }

    /// Checks `|y - r|^2` where `r` is the output at the starting point plus small
    /// noise. Keeping the probe small keeps round-off in the loss far below the
    /// error floor, while every output entry still carries gradient.
    fn probe_check<F>(&mut self, name: &'static str, store: &ParamStore, max_per_param: Option<usize>, rng: &mut impl Rng, f: F) -> Result<()>
    where
        F: Fn(&mut Tape) -> Result<Var>,
    {
        let mut tape = Tape::new(store, Mode::Train, ChaCha8Rng::seed_from_u64(self.seed));
        let y = f(&mut tape)?;
        let mut target = tape.value(y).clone();
        target.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.001..0.001));
        self.check(name, store, max_per_param, |tape| {
            let y = f(tape)?;
            probe(tape, y, &target)
        })
    }

    fn check_in<F>(
        &mut self,
        name: &'static str,
        store: &ParamStore,
        mode: Mode,
        max_per_param: Option<usize>,
        richardson: bool,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&mut Tape) -> Result<Var>,
    {
        let fault = self.fault;
        let opts = GradCheckOptions { h: self.h, mode, max_per_param, richardson, seed: self.seed, ..GradCheckOptions::default() };
        let r = grad_check(store, opts, |tape| {
            if let Some(k) = fault {
                tape.corrupt_backward(k);
            }
            f(tape)
        })?;
        self.results.push(ComponentResult {
            name,
            max_rel_error: r.max_rel_error,
            worst_param: r.worst_param,
            worst_pair: r.worst_pair,
            checked_entries: r.checked_entries,
            refined_entries: r.refined_entries,
        });
        Ok(())
    }
}

/// Tiny two-layer classifier used by the end-to-end check.
pub fn tiny_classifier(n_classes: usize) -> ModelConfig {
    ModelConfig {
        layers: vec![
            LayerConfig::new(8, 4, 4, &[8, 8]),
            LayerConfig::new(4, 4, 3, &[8, 12]),
            LayerConfig::new(1, 0, 0, &[16]),
        ],
        head: vec![12],
        ..ModelConfig::desk_classifier(n_classes)
    }
}

/// Tiny two-level segmenter used by the end-to-end check.
pub fn tiny_segmenter(n_classes: usize) -> ModelConfig {
    ModelConfig {
        layers: vec![LayerConfig::new(8, 4, 4, &[8, 8]), LayerConfig::new(4, 4, 3, &[8, 12])],
        head: vec![8],
        ..ModelConfig::desk_segmenter(n_classes)
    }
}

/// Moves biases and batch-norm parameters off their initial values, so checks
/// are not evaluated at ReLU kinks (zero bias meeting a zero input). Biases are
/// shifted positive, which keeps most hidden units away from their kink.
pub fn randomize_offsets(store: &mut ParamStore, rng: &mut impl Rng) {
    for (name, e) in store.iter_mut() {
        let range = if name.ends_with(".bias") {
            0.05..0.3
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            0.8..1.2
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") {
            -0.2..0.2
        } else {
            continue;
        };
        e.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(range.clone()));
    }
}

fn clouds(batch: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<PointCloud>> {
    (0..batch).map(|_| PointCloud::new(uniform(&[n, 3], rng), None, None)).collect()
}

/// Runs all component checks. `fault` corrupts the backward rule of one op kind.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<ComponentResult>> {
    run_suite_with_step(seed, fault, GradCheckOptions::default().h)
}

/// [`run_suite`] with a custom finite-difference step.
pub fn run_suite_with_step(seed: u64, fault: Option<OpKind>, h: f64) -> Result<Vec<ComponentResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = Suite { seed, h, fault, results: Vec::new() };

    {
        let mut s = ParamStore::new();
        let lin = LinearMap::init(&mut s, "lin", 5, 4, &mut rng)?;
        randomize_offsets(&mut s, &mut rng);
        input(&mut s, "x", &[6, 5], &mut rng)?;
        suite.probe_check("linear", &s, None, &mut rng, |tape| {
            let x = tape.param("x")?;
            lin.apply(tape, x)
        })?;
    }
    {
        let mut s = ParamStore::new();
        let bn = BatchNorm::init(&mut s, "bn", 4)?;
        s.set_value("bn.gamma", uniform(&[4], &mut rng))?;
        s.set_value("bn.beta", uniform(&[4], &mut rng))?;
        input(&mut s, "x", &[7, 4], &mut rng)?;
        suite.probe_check("batchnorm", &s, None, &mut rng, |tape| {
            let x = tape.param("x")?;
            bn.apply(tape, x)
        })?;
    }
    for (name, agg) in [("pl_cell_sum", Aggregation::Sum), ("pl_cell_max", Aggregation::Max)] {
        let mut s = ParamStore::new();
        let p = PlParams::init(&mut s, "pl", 4, 6, agg, &mut rng)?;
        randomize_offsets(&mut s, &mut rng);
        input(&mut s, "rel", &[5, 4, 3], &mut rng)?;
        input(&mut s, "f", &[5, 4, 4], &mut rng)?;
        suite.probe_check(name, &s, None, &mut rng, |tape| {
            let (rel, f) = (tape.param("rel")?, tape.param("f")?);
            pl_cell(tape, rel, f, &p)
        })?;
    }
    {
        let mut s = ParamStore::new();
        let p = PnlParams::init(&mut s, "pnl", 4, 5, 6, &mut rng)?;
        randomize_offsets(&mut s, &mut rng);
        input(&mut s, "q", &[2 * 3, 4], &mut rng)?;
        input(&mut s, "k", &[2 * 7, 4], &mut rng)?;
        suite.probe_check("pnl_cell", &s, None, &mut rng, |tape| {
            let (q, k) = (tape.param("q")?, tape.param("k")?);
            Ok(pnl_cell(tape, q, k, 2, &p)?.0)
        })?;
    }
    for (name, weighting) in [("as_group_feature", ShiftWeighting::GroupFeature), ("as_average", ShiftWeighting::Average)] {
        let mut s = ParamStore::new();
        let p = AsParams::init(&mut s, "as", 4, &mut rng)?;
        randomize_offsets(&mut s, &mut rng);
        input(&mut s, "x", &[2 * 10, 3], &mut rng)?;
        input(&mut s, "f", &[2 * 10, 4], &mut rng)?;
        let mode = SamplingMode { weighting, ..SamplingMode::default() };
        suite.probe_check(name, &s, Some(12), &mut rng, |tape| {
            let (x, f) = (tape.param("x")?, tape.param("f")?);
            let out = adaptive_sample(tape, x, f, 2, 4, 5, Some(&p), &mode)?;
            tape.concat(out.new_coords, out.new_feats)
        })?;
    }
    {
        let mut s = ParamStore::new();
        input(&mut s, "logits", &[5, 3], &mut rng)?;
        let labels = [0, 2, 1, 1, 0];
        let w = [0.5, 2.0, 1.25];
        suite.check("ce_loss", &s, None, |tape| {
            let l = tape.param("logits")?;
            ce_loss_weighted(tape, l, &labels, Some(&w))
        })?;
    }
    {
        let mut s = ParamStore::new();
        input(&mut s, "x", &[2 * 6, 3], &mut rng)?;
        suite.check("repulsion_loss", &s, None, |tape| {
            let x = tape.param("x")?;
            repulsion_loss(tape, x, 2, 3, 0.7)
        })?;
    }
    let loss = LossConfig { alpha: 0.01, beta: 1e-3, k_rep: 3, h: KernelScale::Adaptive(2.0), class_weights: None };
    for (name, cfg) in [("classifier_end_to_end", tiny_classifier(3)), ("segmenter_end_to_end", tiny_segmenter(3))] {
        let mut s = ParamStore::new();
        let model = Model::build(&mut s, &cfg, &mut rng)?;
        randomize_offsets(&mut s, &mut rng);
        let cl = clouds(2, 16, &mut rng)?;
        let labels: Vec<usize> = match cfg.task {
            Task::Classification => vec![0, 2],
            Task::Segmentation => (0..32).map(|_| rng.random_range(0..3)).collect(),
        };
        let loss = loss.clone();
        // Fixed batch-norm statistics and no dropout.
        suite.check_in(name, &s, Mode::Eval, Some(6), false, move |tape| {
            let refs: Vec<&PointCloud> = cl.iter().collect();
            let out = model.forward(tape, &refs, false)?;
            Ok(total_loss(tape, &out, &labels, &loss)?.total)
        })?;
    }
    Ok(suite.results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_is_detected_in_linear() {
        let r = run_suite(1, Some(OpKind::MatMul)).unwrap();
        assert!(!r.iter().find(|c| c.name == "linear").unwrap().passed());
    }
}
