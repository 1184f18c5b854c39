//! Robustness and ablation sweeps over trained models.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, inject_noise, sparsify, CorruptionSpec, FeatureFill, Sample};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::network::{evaluate, Model};
use crate::params::ParamStore;

/// Seeds over which every sweep cell is repeated.
pub const EVAL_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// A model under evaluation, labeled by its configuration.
pub struct Candidate<'a> {
    pub label: String,
    pub model: &'a Model,
    pub params: &'a ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub config: String,
    pub level: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub config: String,
    pub level: f64,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub runtime_secs: f64,
    pub seed: u64,
}

fn key(level: f64) -> u64 {
    level.to_bits()
}

impl SweepResult {
    /// Mean and sample std per (config, level, metric), in first-seen order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<(String, u64, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            let k = (r.config.clone(), key(r.level), r.metric.clone());
            if !groups.contains_key(&k) {
                order.push((k.clone(), r.level));
            }
            groups.entry(k).or_default().push(r.value);
        }
        order
            .into_iter()
            .map(|(k, level)| {
                let v = &groups[&k];
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                SummaryRow { config: k.0, level, metric: k.2, mean, std, n }
            })
            .collect()
    }

    pub fn mean(&self, config: &str, level: f64) -> Option<f64> {
        self.summary().into_iter().find(|s| s.config == config && key(s.level) == key(level)).map(|s| s.mean)
    }

    /// One row per evaluation: `{config_col},{level_col},seed,{metric}`.
    pub fn to_csv(&self, config_col: &str, level_col: &str) -> String {
        let metric = self.rows.first().map_or("accuracy", |r| r.metric.as_str());
        let mut s = format!("{config_col},{level_col},seed,{metric}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.config, r.level, r.seed, r.value);
        }
        s
    }

    /// One row per cell: `{config_col},{level_col},{metric}_mean,{metric}_std`.
    pub fn summary_csv(&self, config_col: &str, level_col: &str) -> String {
        let metric = self.rows.first().map_or("accuracy", |r| r.metric.as_str());
        let mut s = format!("{config_col},{level_col},{metric}_mean,{metric}_std\n");
        for r in self.summary() {
            let _ = writeln!(s, "{},{},{},{}", r.config, r.level, r.mean, r.std);
        }
        s
    }
}

/// Evaluates `c` on `test` after transforming every cloud with `corrupt`.
pub fn corrupted_accuracy(
    c: &Candidate,
    test: &[Sample],
    seed: u64,
    batch_size: usize,
    corrupt: impl Fn(&PointCloud, &mut ChaCha8Rng) -> Result<PointCloud>,
) -> Result<f64> {
    let corrupted = test
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            Ok(Sample { cloud: corrupt(&s.cloud, &mut rng)?, label: s.label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(c.model, c.params, &corrupted, batch_size, seed)?.overall_accuracy)
}

fn sweep(
    candidates: &[Candidate],
    levels: &[f64],
    seeds: &[u64],
    mut cell: impl FnMut(&Candidate, f64, u64) -> Result<f64>,
) -> Result<SweepResult> {
    if candidates.is_empty() || levels.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("sweep needs candidates, levels and seeds".into()));
    }
    let t = Instant::now();
    let mut rows = Vec::new();
    for c in candidates {
        for &level in levels {
            for &seed in seeds {
                let value = cell(c, level, seed)?;
                if !value.is_finite() {
                    return Err(Error::Parameter(format!("non-finite metric for {} at {level}", c.label)));
                }
                rows.push(SweepRow { config: c.label.clone(), level, seed, metric: "accuracy".into(), value });
            }
        }
    }
    Ok(SweepResult { rows, runtime_secs: t.elapsed().as_secs_f64(), seed: seeds[0] })
}

/// Accuracy when a fraction of each test cloud is replaced by uniform noise in `[-1, 1]^3`.
pub fn noise_sweep(candidates: &[Candidate], test: &[Sample], ratios: &[f64], seeds: &[u64]) -> Result<SweepResult> {
    for &r in ratios {
        CorruptionSpec::noise(r).validate()?;
    }
    sweep(candidates, ratios, seeds, |c, ratio, seed| {
        corrupted_accuracy(c, test, seed, 32, |pc, rng| {
            if ratio == 0.0 {
                return Ok(pc.clone());
            }
            inject_noise(pc, &CorruptionSpec::noise(ratio), FeatureFill::Coords, rng)
        })
    })
}

/// Accuracy on random subsets of `count` points per test cloud. A count equal to
/// the cloud size evaluates the clouds unchanged.
pub fn sparsity_sweep(candidates: &[Candidate], test: &[Sample], counts: &[usize], seeds: &[u64]) -> Result<SweepResult> {
    let n = test.first().ok_or_else(|| Error::Parameter("empty test set".into()))?.cloud.len();
    if let Some(&bad) = counts.iter().find(|&&c| c > n || c == 0) {
        return Err(Error::Parameter(format!("count {bad} not in 1..={n}")));
    }
    let levels: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sweep(candidates, &levels, seeds, |c, level, seed| {
        let m = level as usize;
        corrupted_accuracy(c, test, seed, 32, |pc, rng| if m == pc.len() { Ok(pc.clone()) } else { sparsify(pc, m, rng) })
    })
}

/// Clean accuracy of each sampling-mode candidate, repeated over seeds (seeds
/// drive random initial sampling and random FPS starts).
pub fn as_ablation(candidates: &[Candidate], test: &[Sample], seeds: &[u64]) -> Result<SweepResult> {
    sweep(candidates, &[0.0], seeds, |c, _, seed| Ok(evaluate(c.model, c.params, test, 32, seed)?.overall_accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result() -> SweepResult {
        let rows = [("a", 0.0, 0.5), ("a", 0.0, 0.7), ("a", 0.1, 0.4), ("b", 0.0, 1.0)]
            .iter()
            .enumerate()
            .map(|(i, &(c, l, v))| SweepRow { config: c.into(), level: l, seed: i as u64, metric: "accuracy".into(), value: v })
            .collect();
        SweepResult { rows, runtime_secs: 0.0, seed: 0 }
    }

    #[test]
    fn summary_stats() {
        let r = result();
        let s = r.summary();
        assert_eq!(s.len(), 3);
        assert!((s[0].mean - 0.6).abs() < 1e-12);
        assert!((s[0].std - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!(s[2].std, 0.0);
        assert_eq!(r.mean("a", 0.1), Some(0.4));
        assert_eq!(r.mean("c", 0.0), None);
    }

    #[test]
    fn csv_schema() {
        let csv = result().to_csv("variant", "ratio");
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("variant,ratio,seed,accuracy"));
        assert_eq!(lines.next(), Some("a,0,0,0.5"));
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(result().summary_csv("mode", "level").lines().next(), Some("mode,level,accuracy_mean,accuracy_std"));
    }
}
