use crate::data::Sample;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Mode, Tape};

use super::config::Task;
use super::model::Model;
use super::train::step_rng;

/// Accuracy and IoU summary of a confusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// Recall per ground-truth class; `None` for classes with no samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean IoU over classes present in the predictions or the ground truth.
    pub miou: f64,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::Parameter("no predictions to score".into()));
        }
        if pred.len() != truth.len() {
            return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&p, &t) in pred.iter().zip(truth) {
            for l in [p, t] {
                if l >= n_classes {
                    return Err(Error::Label { label: l, classes: n_classes });
                }
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        let mut ious = Vec::new();
        for c in 0..n_classes {
            let tp = confusion[c][c];
            let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
            let fp: usize = (0..n_classes).map(|t| confusion[t][c]).sum::<usize>() - tp;
            if tp + fp + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp + fn_) as f64);
            }
        }
        Ok(Self {
            overall_accuracy: correct as f64 / pred.len() as f64,
            per_class_accuracy,
            miou: ious.iter().sum::<f64>() / ious.len() as f64,
            confusion,
        })
    }
}

/// Row-wise argmax (first maximum on ties).
pub fn argmax_rows(t: &crate::tensor::Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predicted labels (per cloud or per point) in evaluation mode.
pub fn predict(model: &Model, params: &ParamStore, samples: &[&Sample], seed: u64) -> Result<Vec<usize>> {
    let mut tape = Tape::new(params, Mode::Eval, step_rng(seed, u64::MAX));
    let clouds: Vec<_> = samples.iter().map(|s| &s.cloud).collect();
    let out = model.forward(&mut tape, &clouds, false)?;
    Ok(argmax_rows(tape.value(out.logits)))
}

/// Evaluation-mode metrics over a dataset.
pub fn evaluate(model: &Model, params: &ParamStore, samples: &[Sample], batch_size: usize, seed: u64) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Parameter("cannot evaluate an empty dataset".into()));
    }
    let cfg = model.config();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (i, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        pred.extend(predict(model, params, &refs, seed.wrapping_add(i as u64))?);
        truth.extend(super::train::batch_labels(cfg.task, &refs)?);
    }
    debug_assert!(cfg.task == Task::Segmentation || pred.len() == samples.len());
    Metrics::from_predictions(&pred, &truth, cfg.n_classes)
}
