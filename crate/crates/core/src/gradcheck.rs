//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamStore};
use crate::tape::{Mode, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub mode: Mode,
    /// Checks at most this many evenly spaced entries per parameter tensor.
    pub max_per_param: Option<usize>,
    /// How many times the step may shrink tenfold when a perturbation changes a
    /// discrete choice (see [`Tape::branch_signature`]).
    pub max_refinements: u32,
    /// Combines central differences at `h` and `h / 2` as `(4 D(h/2) - D(h)) / 3`,
    /// cancelling the `h^2` truncation term.
    pub richardson: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, mode: Mode::Train, max_per_param: None, max_refinements: 3, richardson: false, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub per_param: Vec<(String, f64)>,
    pub checked_entries: usize,
    /// Entries whose step was shrunk because `x +- h` crossed a kink.
    pub refined_entries: usize,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: Option<(f64, f64)>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` against central differences for every
/// trainable entry of `store`.
///
/// `f` must be deterministic: each evaluation gets a fresh tape seeded with
/// `opts.seed`, so dropout masks repeat, but batch-norm in train mode depends on
/// the batch and is differentiated exactly.
///
/// When `x + h` or `x - h` lands on a different piece of a piecewise-smooth `f`
/// (a ReLU flips, a max or neighbor set changes) the central difference is not
/// an estimate of the derivative at `x`. A second-order one-sided difference is
/// used when one side stays on the same piece; otherwise the step is divided by
/// ten, up to `opts.max_refinements` times. The last estimate is compared
/// either way.
pub fn grad_check<F>(store: &ParamStore, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new(s, opts.mode, ChaCha8Rng::seed_from_u64(opts.seed));
        let out = f(&mut tape)?;
        Ok((tape.value(out).data()[0], tape.branch_signature()))
    };

    let mut tape = Tape::new(store, opts.mode, ChaCha8Rng::seed_from_u64(opts.seed));
    let out = f(&mut tape)?;
    let base = tape.branch_signature();
    let f0 = tape.value(out).data()[0];
    let grads = tape.backward(out)?;
    let analytic: Vec<(String, Option<Vec<f64>>)> = tape
        .param_grads(&grads)
        .into_iter()
        .map(|(n, g)| (n.to_string(), g.map(|t| t.data().to_vec())))
        .collect();

    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut checked = 0;
    let mut refined = 0;
    let mut worst: Option<(String, f64, Option<(f64, f64)>)> = None;
    for (name, entry) in store.iter() {
        if entry.kind != EntryKind::Trainable {
            continue;
        }
        let n = entry.value.len();
        let a = analytic.iter().find(|(k, _)| k == name).and_then(|(_, g)| g.clone());
        if let Some(a) = &a {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        let stride = opts.max_per_param.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut max_err: f64 = -1.0;
        let mut pair = None;
        for i in (0..n).step_by(stride) {
            let orig = entry.value.data()[i];
            let set = |w: &mut ParamStore, v: f64| -> Result<()> {
                w.get_mut(name)?.value.data_mut()[i] = v;
                Ok(())
            };
            let mut step = opts.h;
            let mut numeric;
            let mut round = 0;
            loop {
                set(&mut work, orig + step)?;
                let (fp, sp) = eval(&work)?;
                set(&mut work, orig - step)?;
                let (fm, sm) = eval(&work)?;
                numeric = (fp - fm) / (2.0 * step);
                if sp == base && sm == base {
                    if opts.richardson {
                        set(&mut work, orig + step / 2.0)?;
                        let (hp, hsp) = eval(&work)?;
                        set(&mut work, orig - step / 2.0)?;
                        let (hm, hsm) = eval(&work)?;
                        if hsp == base && hsm == base {
                            numeric = (4.0 * (hp - hm) / step - numeric) / 3.0;
                        }
                    }
                    break;
                }
                // Second-order one-sided difference on the side that stays smooth.
                if sp == base || sm == base {
                    let (dir, far) = if sp == base { (1.0, fp) } else { (-1.0, fm) };
                    set(&mut work, orig + dir * step / 2.0)?;
                    let (mid, smid) = eval(&work)?;
                    if smid == base {
                        numeric = dir * (4.0 * mid - 3.0 * f0 - far) / step;
                        round = round.max(1);
                        break;
                    }
                }
                if round == opts.max_refinements {
                    break;
                }
                round += 1;
                step /= 10.0;
            }
            set(&mut work, orig)?;
            if round > 0 {
                refined += 1;
            }
            let an = a.as_ref().map_or(0.0, |g| g[i]);
            let e = relative_error(an, numeric);
            if e > max_err {
                max_err = e;
                pair = Some((an, numeric));
            }
            checked += 1;
        }
        max_err = max_err.max(0.0);
        if worst.as_ref().is_none_or(|(_, e, _)| max_err > *e) {
            worst = Some((name.to_string(), max_err, pair));
        }
        per_param.push((name.to_string(), max_err));
    }
    Ok(GradCheckReport {
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.1),
        worst_pair: worst.as_ref().and_then(|w| w.2),
        worst_param: worst.map(|w| w.0),
        per_param,
        checked_entries: checked,
        refined_entries: refined,
    })
}
