//! Learned building blocks on top of the tape: linear maps, batch-norm, dense stacks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamStore};
use crate::tape::{RunningStatUpdate, Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Per-point affine map `x W + b`, parameters owned by a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub weight: String,
    /// Absent for maps whose bias would be cancelled downstream.
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearMap {
    /// Registers `{name}.weight` (Glorot uniform) and `{name}.bias` (zeros).
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut map = Self::init_unbiased(store, name, d_in, d_out, rng)?;
        let bias = format!("{name}.bias");
        store.insert(&bias, Tensor::zeros(&[d_out]), EntryKind::Trainable)?;
        map.bias = Some(bias);
        Ok(map)
    }

    /// Registers only `{name}.weight`: `x W`.
    pub fn init_unbiased(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert_glorot(&weight, d_in, d_out, rng)?;
        Ok(Self { weight, bias: None, d_in, d_out })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = tape.value(x).cols();
        if d != self.d_in {
            return Err(Error::Dimension(format!(
                "`{}` expects {} input channels, got {d}",
                self.weight, self.d_in
            )));
        }
        let w = tape.param(&self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(b)?;
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Batch-norm parameters (`gamma`, `beta`) and running statistics stored under a prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub prefix: String,
    pub dim: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        store.insert(&format!("{prefix}.gamma"), Tensor::filled(&[dim], 1.0), EntryKind::Trainable)?;
        store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[dim]), EntryKind::Trainable)?;
        store.insert(&format!("{prefix}.running_mean"), Tensor::zeros(&[dim]), EntryKind::Buffer)?;
        store.insert(&format!("{prefix}.running_var"), Tensor::filled(&[dim], 1.0), EntryKind::Buffer)?;
        Ok(Self { prefix: prefix.to_string(), dim, eps: BN_EPS })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.batchnorm(x, &self.prefix, self.eps)
    }
}

/// Folds queued batch statistics into the running statistics:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn commit_running_stats(
    store: &mut ParamStore,
    updates: &[RunningStatUpdate],
    momentum: f64,
) -> Result<()> {
    for u in updates {
        for (name, batch) in [(&u.mean_name, &u.batch_mean), (&u.var_name, &u.batch_var)] {
            let e = store.get_mut(name)?;
            for (r, b) in e.value.data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
    Ok(())
}

/// Linear map optionally followed by batch-norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub linear: LinearMap,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

impl Dense {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bn: bool,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Batch-norm removes any per-channel offset, so the map carries no bias.
        let linear = if bn {
            LinearMap::init_unbiased(store, name, d_in, d_out, rng)?
        } else {
            LinearMap::init(store, name, d_in, d_out, rng)?
        };
        let bn = if bn { Some(BatchNorm::init(store, &format!("{name}.bn"), d_out)?) } else { None };
        Ok(Self { linear, bn, relu })
    }

    pub fn d_out(&self) -> usize {
        self.linear.d_out
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut y = self.linear.apply(tape, x)?;
        if let Some(bn) = &self.bn {
            y = bn.apply(tape, y)?;
        }
        if self.relu {
            y = tape.relu(y);
        }
        Ok(y)
    }
}

/// A stack of [`Dense`] layers (all with batch-norm and ReLU).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = d_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Dense::init(store, &format!("{name}.{i}"), d, w, true, true, rng)?);
            d = w;
        }
        Ok(Self { layers })
    }

    pub fn d_out(&self) -> Option<usize> {
        self.layers.last().map(Dense::d_out)
    }

    pub fn apply(&self, tape: &mut Tape, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.apply(tape, x)?;
        }
        Ok(x)
    }
}

/// Channel-wise maximum over the rows of `x[N x D]`, giving `[D]`.
pub fn maxpool_set(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("maxpool_set needs [N x D], got {s:?}")));
    }
    let g = tape.reshape(x, &[1, s[0], s[1]])?;
    let m = tape.max_pool(g)?;
    tape.reshape(m, &[s[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn linear_with(store: &mut ParamStore, w: Vec<f64>, b: Vec<f64>) -> LinearMap {
        let d_out = b.len();
        let d_in = w.len() / d_out;
        let lin = LinearMap::init(store, "lin", d_in, d_out, &mut rng()).unwrap();
        store.set_value(&lin.weight, Tensor::new(&[d_in, d_out], w).unwrap()).unwrap();
        store.set_value(lin.bias.as_ref().unwrap(), Tensor::new(&[d_out], b).unwrap()).unwrap();
        lin
    }

    fn run_linear(w: Vec<f64>, b: Vec<f64>, x: Vec<f64>) -> Vec<f64> {
        let mut store = ParamStore::new();
        let lin = linear_with(&mut store, w, b);
        let mut tape = Tape::new(&store, Mode::Eval, rng());
        let xv = tape.constant(Tensor::new(&[1, x.len()], x).unwrap());
        let y = lin.apply(&mut tape, xv).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn linear_examples() {
        assert_eq!(run_linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vec![1.0, 2.0]), [1.0, 2.0]);
        assert_eq!(run_linear(vec![0.3, -2.0, 5.0, 1.0], vec![3.0, -1.0], vec![0.0, 0.0]), [3.0, -1.0]);
        assert_eq!(run_linear(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0], vec![1.0, 1.0]), [4.0, 6.0]);
    }

    #[test]
    fn linear_rejects_wrong_channels() {
        let mut store = ParamStore::new();
        let lin = linear_with(&mut store, vec![1.0; 4], vec![0.0; 2]);
        let mut tape = Tape::new(&store, Mode::Eval, rng());
        let xv = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(lin.apply(&mut tape, xv), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, rng());
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let x2 = tape.constant(Tensor::new(&[2], vec![0.5, 3.0]).unwrap());
        let y2 = tape.relu(x2);
        assert_eq!(tape.value(y2), tape.value(x2));
    }

    #[test]
    fn softmax_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, rng());
        let a = tape.constant(Tensor::zeros(&[3]));
        let a = tape.softmax(a);
        for &v in tape.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = tape.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
        let b = tape.softmax(b);
        assert_eq!(tape.value(b).data(), &[0.5, 0.5]);
        let c = tape.constant(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
        let c = tape.softmax(c);
        assert!((tape.value(c).data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(c).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_examples() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::init(&mut store, "bn", 1).unwrap();
        // Eval mode with gamma 2, beta 1, running stats (0, 1): 2 * 1 / sqrt(1 + eps) + 1.
        store.set_value("bn.gamma", Tensor::filled(&[1], 2.0)).unwrap();
        store.set_value("bn.beta", Tensor::filled(&[1], 1.0)).unwrap();
        let mut tape = Tape::new(&store, Mode::Eval, rng());
        let x = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let y = bn.apply(&mut tape, x).unwrap();
        assert!((tape.value(y).data()[0] - 3.0).abs() < 1e-5);

        let mut store = ParamStore::new();
        let bn = BatchNorm::init(&mut store, "bn", 2).unwrap();
        let mut tape = Tape::new(&store, Mode::Train, rng());
        // Column 0 zero-mean unit-variance, column 1 constant.
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 4.0, -1.0, 4.0]).unwrap());
        let y = bn.apply(&mut tape, x).unwrap();
        let yv = tape.value(y);
        assert!((yv.get(&[0, 0]) - 1.0).abs() < 1e-5);
        assert!((yv.get(&[1, 0]) + 1.0).abs() < 1e-5);
        assert!(yv.get(&[0, 1]).abs() < 1e-12 && yv.get(&[1, 1]).abs() < 1e-12);
        assert_eq!(tape.stat_updates().len(), 1);
    }

    #[test]
    fn batchnorm_training_needs_two_rows() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::init(&mut store, "bn", 3).unwrap();
        let mut tape = Tape::new(&store, Mode::Train, rng());
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(bn.apply(&mut tape, x), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn running_stats_commit_uses_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::init(&mut store, "bn", 1).unwrap();
        let updates = {
            let mut tape = Tape::new(&store, Mode::Train, rng());
            let x = tape.constant(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
            bn.apply(&mut tape, x).unwrap();
            tape.take_stat_updates()
        };
        commit_running_stats(&mut store, &updates, BN_MOMENTUM).unwrap();
        assert!((store.value("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
        assert!((store.value("bn.running_var").unwrap().data()[0] - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn maxpool_set_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, rng());
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        let m = maxpool_set(&mut tape, x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let xp = tape.constant(Tensor::from_rows(&[vec![3.0, 2.0], vec![1.0, 5.0]]).unwrap());
        let mp = maxpool_set(&mut tape, xp).unwrap();
        assert_eq!(tape.value(mp), tape.value(m));
        let one = tape.constant(Tensor::from_rows(&[vec![7.0, -1.0]]).unwrap());
        let mo = maxpool_set(&mut tape, one).unwrap();
        assert_eq!(tape.value(mo).data(), &[7.0, -1.0]);
    }

    #[test]
    fn maxpool_gradient_goes_to_first_argmax() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval, rng());
        let x = tape.constant(Tensor::from_rows(&[vec![2.0], vec![2.0]]).unwrap());
        let m = maxpool_set(&mut tape, x).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn dropout_modes() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Train, rng());
        let x = tape.constant(Tensor::filled(&[4], 2.0));
        assert_eq!(tape.dropout(x, 0.0).unwrap(), x);
        assert!(tape.dropout(x, 1.0).is_err());
        let mut eval = Tape::new(&store, Mode::Eval, rng());
        let xe = eval.constant(Tensor::filled(&[4], 2.0));
        assert_eq!(eval.dropout(xe, 0.7).unwrap(), xe);
    }

    #[test]
    fn dropout_expectation_monte_carlo() {
        // Each kept entry is scaled by 1/(1-p); the mean of 10^4 draws of value 1
        // has standard deviation sqrt(p/(1-p))/100.
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Train, rng());
        let p = 0.4;
        let x = tape.constant(Tensor::filled(&[10_000], 1.0));
        let y = tape.dropout(x, p).unwrap();
        let mean = tape.value(y).sum() / 10_000.0;
        let sigma = (p / (1.0 - p)).sqrt() / 100.0;
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
    }
}
