use crate::error::{Error, Result};
use crate::geom::{knn_query, mean_nn_distance};
use crate::sampling::cloud_block;
use crate::tape::{Tape, Var};

use super::model::ForwardOutput;

/// Kernel scale of the repulsion term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelScale {
    Fixed(f64),
    /// Multiple of the mean nearest-neighbor distance of the first layer input,
    /// computed per batch.
    Adaptive(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub k_rep: usize,
    pub h: KernelScale,
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 1e-5, k_rep: 8, h: KernelScale::Adaptive(2.0), class_weights: None }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!("alpha {} and beta {} must be >= 0", self.alpha, self.beta)));
        }
        let h = match self.h {
            KernelScale::Fixed(h) | KernelScale::Adaptive(h) => h,
        };
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("kernel scale {h} must be positive")));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(Error::Config("class weights must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Mean weighted negative log-softmax over the rows of `logits[R x C]`.
pub fn ce_loss_weighted(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let c = tape.value(logits).cols();
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::Dimension(format!("{} class weights for {c} classes", w.len())));
        }
    }
    let weights = labels
        .iter()
        .map(|&l| match class_weights {
            Some(w) if l < c => w[l],
            _ => 1.0,
        })
        .collect::<Vec<_>>();
    tape.cross_entropy(logits, labels, &weights)
}

/// Inverse-frequency class weights normalized to mean one over present classes.
pub fn inverse_frequency_weights(labels: impl IntoIterator<Item = usize>, n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for l in labels {
        if l < n_classes {
            counts[l] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { total as f64 / (present as f64 * c as f64) })
        .collect()
}

/// Directed `(i, j)` pairs linking every point of each cloud to its `k_rep`
/// nearest other points, as global rows of `coords[B*N x 3]`.
pub fn repulsion_pairs(coords: &crate::tensor::Tensor, batch: usize, k_rep: usize) -> Result<Vec<(usize, usize)>> {
    let n = coords.rows() / batch;
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let k = k_rep.min(n - 1);
    let mut pairs = Vec::with_capacity(batch * n * k);
    for b in 0..batch {
        let block = cloud_block(coords, b, n);
        let nn = knn_query(&block, &block, k + 1)?;
        for (i, row) in nn.iter().enumerate() {
            // The query itself is normally first but coincident points may tie.
            let mut others: Vec<usize> = row.iter().copied().filter(|&j| j != i).take(k).collect();
            others.sort_unstable();
            pairs.extend(others.into_iter().map(|j| (i + b * n, j + b * n)));
        }
    }
    Ok(pairs)
}

/// `sum_i sum_{j in kNN(i)} exp(-|x_i - x_j|^2 / h^2)` over one sampled set
/// `[N_s x 3]` (or the sum over a batch of them).
pub fn repulsion_loss(tape: &mut Tape, coords: Var, batch: usize, k_rep: usize, h: f64) -> Result<Var> {
    let pairs = repulsion_pairs(tape.value(coords), batch, k_rep)?;
    tape.repulsion(coords, &pairs, h)
}

/// `sum theta^2` over every trainable tensor of the store.
pub fn weight_decay(tape: &mut Tape) -> Result<Var> {
    let names: Vec<String> = tape.store().trainable_names();
    let mut acc: Option<Var> = None;
    for name in names {
        let p = tape.param(&name)?;
        let s = tape.sum_squares(p);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::Empty("no trainable parameters".into()))
}

/// The individual terms and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub repulsion: Option<Var>,
    pub weight_decay: Option<Var>,
    /// Kernel scale used for the repulsion term.
    pub h: f64,
}

/// Per-batch kernel scale.
pub fn kernel_scale(scale: KernelScale, input_coords: &crate::tensor::Tensor, batch: usize) -> Result<f64> {
    match scale {
        KernelScale::Fixed(h) => Ok(h),
        KernelScale::Adaptive(m) => {
            let n = input_coords.rows() / batch;
            let mut acc = 0.0;
            for b in 0..batch {
                acc += mean_nn_distance(&cloud_block(input_coords, b, n))?;
            }
            let h = m * acc / batch as f64;
            if h > 0.0 {
                Ok(h)
            } else {
                Err(Error::DegenerateBatch(n))
            }
        }
    }
}

/// `CE + alpha * Rep + beta * |theta|^2`, with the repulsion averaged over the
/// clouds of the batch and computed on the adapted first-layer points.
pub fn total_loss(tape: &mut Tape, out: &ForwardOutput, labels: &[usize], cfg: &LossConfig) -> Result<LossTerms> {
    let ce = ce_loss_weighted(tape, out.logits, labels, cfg.class_weights.as_deref())?;
    let mut total = ce;
    let mut h = 0.0;
    let repulsion = if cfg.alpha > 0.0 {
        h = kernel_scale(cfg.h, &out.input_coords, out.batch)?;
        let (coords, _) = out.first_layer();
        let rep = repulsion_loss(tape, coords, out.batch, cfg.k_rep, h)?;
        let scaled = tape.scale(rep, cfg.alpha / out.batch as f64);
        total = tape.add(total, scaled)?;
        Some(rep)
    } else {
        None
    };
    let weight_decay = if cfg.beta > 0.0 {
        let wd = weight_decay(tape)?;
        let scaled = tape.scale(wd, cfg.beta);
        total = tape.add(total, scaled)?;
        Some(wd)
    } else {
        None
    };
    Ok(LossTerms { total, ce, repulsion, weight_decay, h })
}
