//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every node stores its forward value plus whatever the backward rule needs.
//! Gradients are propagated in reverse recording order, which is a valid
//! topological order because an op can only consume earlier nodes.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation tags, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    AddBias,
    Add,
    Sub,
    Scale,
    Relu,
    Softmax,
    BatchNorm,
    Bmm,
    Reshape,
    GatherRows,
    SubCenter,
    MaxPool,
    SumPool,
    Concat,
    Dropout,
    Sum,
    SumSquares,
    CrossEntropy,
    Repulsion,
    InterpWeights,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::BatchNorm,
        OpKind::Bmm,
        OpKind::Reshape,
        OpKind::GatherRows,
        OpKind::SubCenter,
        OpKind::MaxPool,
        OpKind::SumPool,
        OpKind::Concat,
        OpKind::Dropout,
        OpKind::Sum,
        OpKind::SumSquares,
        OpKind::CrossEntropy,
        OpKind::Repulsion,
        OpKind::InterpWeights,
    ];

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Bmm => "bmm",
            OpKind::Reshape => "reshape",
            OpKind::GatherRows => "gather_rows",
            OpKind::SubCenter => "sub_center",
            OpKind::MaxPool => "maxpool",
            OpKind::SumPool => "sumpool",
            OpKind::Concat => "concat",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
            OpKind::SumSquares => "sum_squares",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Repulsion => "repulsion",
            OpKind::InterpWeights => "interp_weights",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        dims: [usize; 4],
    },
    Reshape(Var),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    SubCenter {
        grouped: Var,
        centers: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SumPool(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    Repulsion {
        coords: Var,
        pairs: Vec<(usize, usize)>,
        inv_h2: f64,
    },
    InterpWeights {
        dst: Var,
        src: Var,
        idx: Vec<[usize; 3]>,
        eps: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::Reshape(_) => OpKind::Reshape,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SubCenter { .. } => OpKind::SubCenter,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::SumPool(_) => OpKind::SumPool,
            Op::Concat { .. } => OpKind::Concat,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum(_) => OpKind::Sum,
            Op::SumSquares(_) => OpKind::SumSquares,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Repulsion { .. } => OpKind::Repulsion,
            Op::InterpWeights { .. } => OpKind::InterpWeights,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Pending batch-norm running-statistic update produced by a training forward pass.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Forward mode of a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch-norm, dropout active.
    Train,
    /// Running statistics for batch-norm, dropout is identity.
    Eval,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// A recording of one forward pass.
pub struct Tape<'s> {
    nodes: Vec<Node>,
    store: &'s ParamStore,
    params: HashMap<String, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    stat_updates: Vec<RunningStatUpdate>,
    fault: Option<OpKind>,
    branches: DefaultHasher,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            params: HashMap::new(),
            mode,
            rng,
            stat_updates: Vec::new(),
            fault: None,
            branches: DefaultHasher::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every backward contribution of `kind` by 1.5. Used only to verify
    /// that the gradient checker catches a broken backward rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn stat_updates(&self) -> &[RunningStatUpdate] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<RunningStatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Hash of every discrete choice made so far: ReLU signs, max-pool winners and
    /// gathered indices. Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches.finish()
    }

    fn note_branch(&mut self, choice: impl Hash) {
        choice.hash(&mut self.branches);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter from the store; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = self.store.value(name)?.clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x[.. x A] * w[A x B]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(Error::Dimension(format!("matmul {xs:?} x {ws:?}")));
        }
        let (r, a, b) = (self.value(x).rows(), ws[0], ws[1]);
        let mut out = vec![0.0; r * b];
        gemm(self.value(x).data(), self.value(w).data(), &mut out, r, a, b);
        let mut shape = xs;
        *shape.last_mut().unwrap() = b;
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { x, w }))
    }

    /// Adds a `[D]` bias to every row of `x[.. x D]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(b) != [d] {
            return Err(Error::Dimension(format!(
                "bias {:?} for {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(bv) {
            *o -= v;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
        self.note_branch(signs);
        self.push(out, Op::Relu(x))
    }

    /// Max-shifted softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    /// Batch normalization over all rows of `x[.. x D]`.
    ///
    /// In [`Mode::Train`] the batch statistics are used and a running-stat update
    /// is queued; in [`Mode::Eval`] the stored running statistics are used.
    pub fn batchnorm(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let xt = self.value(x);
        let (rows, d) = (xt.rows(), xt.cols());
        if self.shape(gamma) != [d] {
            return Err(Error::Dimension(format!(
                "batchnorm `{prefix}` has {:?} channels, input {:?}",
                self.shape(gamma),
                xt.shape()
            )));
        }
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            if rows < 2 {
                return Err(Error::DegenerateBatch(rows));
            }
            let mut mean = vec![0.0; d];
            for row in xt.data().chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; d];
            for row in xt.data().chunks(d) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            (mean, var)
        } else {
            (
                self.store.value(&mean_name)?.data().to_vec(),
                self.store.value(&var_name)?.data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = Vec::with_capacity(rows * d);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(x).data().chunks(d) {
            for c in 0..d {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(g[c] * h + bt[c]);
            }
        }
        if batch_stats {
            self.stat_updates.push(RunningStatUpdate {
                mean_name,
                var_name,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
        ))
    }

    /// Batched matrix product `op(a) * op(b)` over the leading batch axis.
    ///
    /// `a` is `[B x M x K]` (`[B x K x M]` when `trans_a`), `b` is `[B x K x N]`
    /// (`[B x N x K]` when `trans_b`). Transposing both is not supported.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || (trans_a && trans_b) {
            return Err(Error::Dimension(format!("bmm {sa:?} x {sb:?}")));
        }
        let (m, ka) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::Dimension(format!("bmm inner extents {sa:?} x {sb:?}")));
        }
        let (batch, k) = (sa[0], ka);
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                match (trans_a, trans_b) {
                    (false, false) => gemm(ai, bi, oi, m, k, n),
                    (false, true) => gemm_bt(ai, bi, oi, m, k, n),
                    (true, false) => gemm_at(ai, bi, oi, k, m, n),
                    (true, true) => unreachable!(),
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm { a, b, trans_a, trans_b, dims: [batch, m, k, n] },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Gathers rows of `src` (leading axes flattened) into `[idx.len() x D]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(src).select_rows(idx)?;
        self.note_branch(idx);
        Ok(self.push(out, Op::GatherRows { src, idx: idx.to_vec() }))
    }

    /// `grouped[G x K x C] - centers[G x C]`, broadcast over the K axis.
    pub fn sub_center(&mut self, grouped: Var, centers: Var) -> Result<Var> {
        let (sg, sc) = (self.shape(grouped).to_vec(), self.shape(centers).to_vec());
        if sg.len() != 3 || sc.len() != 2 || sg[0] != sc[0] || sg[2] != sc[1] {
            return Err(Error::Dimension(format!("sub_center {sg:?} - {sc:?}")));
        }
        let (k, c) = (sg[1], sg[2]);
        let cv = self.value(centers).data().to_vec();
        let mut out = self.value(grouped).clone();
        for (gi, block) in out.data_mut().chunks_mut(k * c).enumerate() {
            let center = &cv[gi * c..(gi + 1) * c];
            for row in block.chunks_mut(c) {
                for (o, cc) in row.iter_mut().zip(center) {
                    *o -= cc;
                }
            }
        }
        Ok(self.push(out, Op::SubCenter { grouped, centers }))
    }

    /// Max over the middle axis of `x[G x K x D]`; gradient goes to the first argmax.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("max_pool needs [G x K x D], got {s:?}")));
        }
        let (g, k, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; g * d];
        let mut argmax = vec![0usize; g * d];
        for gi in 0..g {
            for ki in 0..k {
                let row = &xd[(gi * k + ki) * d..(gi * k + ki + 1) * d];
                for c in 0..d {
                    if row[c] > out[gi * d + c] {
                        out[gi * d + c] = row[c];
                        argmax[gi * d + c] = ki;
                    }
                }
            }
        }
        self.note_branch(&argmax);
        Ok(self.push(Tensor::new(&[g, d], out)?, Op::MaxPool { x, argmax }))
    }

    /// Sum over the middle axis of `x[G x K x D]`.
    pub fn sum_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("sum_pool needs [G x K x D], got {s:?}")));
        }
        let (g, k, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; g * d];
        for gi in 0..g {
            let o = &mut out[gi * d..(gi + 1) * d];
            for row in xd[gi * k * d..(gi + 1) * k * d].chunks(d) {
                for (a, b) in o.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        Ok(self.push(Tensor::new(&[g, d], out)?, Op::SumPool(x)))
    }

    /// Concatenates along the last axis; leading shapes must match.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Dimension(format!("concat {sa:?} with {sb:?}")));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut out = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for (ra, rb) in self.value(a).data().chunks(ca).zip(self.value(b).data().chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { a, b }))
    }

    /// Inverted dropout; identity in eval mode or at `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> =
            (0..n).map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// `(1/R) * sum_i weights[i] * -log softmax(logits_i)[labels[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let lt = self.value(logits);
        let (r, c) = (lt.rows(), lt.cols());
        if labels.len() != r || weights.len() != r {
            return Err(Error::Dimension(format!(
                "cross_entropy: {r} rows, {} labels, {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let probs = softmax_rows(lt);
        let mut loss = 0.0;
        for (i, row) in lt.data().chunks(c).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[labels[i]]);
        }
        loss /= r as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs: probs.into_data(),
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `sum over (i, j) in pairs of exp(-|x_i - x_j|^2 / h^2)` on rows of `coords[.. x 3]`.
    pub fn repulsion(&mut self, coords: Var, pairs: &[(usize, usize)], h: f64) -> Result<Var> {
        if h <= 0.0 {
            return Err(Error::Parameter(format!("repulsion scale h must be > 0, got {h}")));
        }
        self.note_branch(pairs);
        let ct = self.value(coords);
        let rows = ct.rows();
        let inv_h2 = 1.0 / (h * h);
        let mut loss = 0.0;
        for &(i, j) in pairs {
            if i >= rows || j >= rows {
                return Err(Error::Index { index: i.max(j), len: rows });
            }
            loss += (-sq_dist(ct.row(i), ct.row(j)) * inv_h2).exp();
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Repulsion { coords, pairs: pairs.to_vec(), inv_h2 },
        ))
    }

    /// Inverse-squared-distance weights `[G x 3]` of `dst` rows against the three
    /// `src` rows listed per query: `w_j = u_j / sum(u)`, `u_j = (d_j^2 + eps)^-1`.
    pub fn interp_weights(&mut self, dst: Var, src: Var, idx: &[[usize; 3]], eps: f64) -> Result<Var> {
        self.note_branch(idx);
        let (dv, sv) = (self.value(dst), self.value(src));
        if dv.rows() != idx.len() || dv.cols() != 3 || sv.cols() != 3 {
            return Err(Error::Dimension(format!(
                "interp_weights: {} queries {:?} vs sources {:?}",
                idx.len(),
                dv.shape(),
                sv.shape()
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * 3);
        for (g, row) in idx.iter().enumerate() {
            if let Some(&bad) = row.iter().find(|&&j| j >= sv.rows()) {
                return Err(Error::Index { index: bad, len: sv.rows() });
            }
            let u = row.map(|j| 1.0 / (sq_dist(dv.row(g), sv.row(j)) + eps));
            let s: f64 = u.iter().sum();
            out.extend(u.iter().map(|x| x / s));
        }
        let t = Tensor::new(&[idx.len(), 3], out)?;
        Ok(self.push(t, Op::InterpWeights { dst, src, idx: idx.to_vec(), eps }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for id in (0..=out.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let factor = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
            let contributions = self.local_grads(node, &dy);
            for (v, mut g) in contributions {
                if factor != 1.0 {
                    g.data_mut().iter_mut().for_each(|x| *x *= factor);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of every bound parameter, by name.
    pub fn param_grads<'g>(&self, grads: &'g Gradients) -> Vec<(&str, Option<&'g Tensor>)> {
        let mut out: Vec<_> =
            self.params.iter().map(|(n, &v)| (n.as_str(), grads.get(v))).collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    /// Consumes the tape, returning owned parameter gradients and queued
    /// batch-norm statistic updates, so the store can be mutated afterwards.
    pub fn into_param_grads(
        self,
        grads: &Gradients,
    ) -> Result<(Vec<(String, Tensor)>, Vec<RunningStatUpdate>)> {
        let mut out = Vec::with_capacity(self.params.len());
        for (name, g) in self.param_grads(grads) {
            let Some(g) = g else { continue };
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
            out.push((name.to_string(), g.clone()));
        }
        Ok((out, self.stat_updates))
    }

    fn local_grads(&self, node: &Node, dy: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let (r, a, b) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                let mut dx = Tensor::zeros(xv.shape());
                gemm_bt(dy.data(), wv.data(), dx.data_mut(), r, b, a);
                let mut dw = Tensor::zeros(wv.shape());
                gemm_at(xv.data(), dy.data(), dw.data_mut(), r, a, b);
                vec![(*x, dx), (*w, dw)]
            }
            Op::AddBias { x, b } => {
                let d = dy.cols();
                let mut db = vec![0.0; d];
                for row in dy.data().chunks(d) {
                    for (s, v) in db.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                vec![(*x, dy.clone()), (*b, Tensor::new(&[d], db).unwrap())]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.map(|v| -v))],
            Op::Scale(x, s) => vec![(*x, dy.map(|v| v * s))],
            Op::Relu(x) => {
                let mut dx = dy.clone();
                for (g, &xv) in dx.data_mut().iter_mut().zip(val(*x).data()) {
                    if xv <= 0.0 {
                        *g = 0.0;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                for ((yr, gr), dr) in
                    y.data().chunks(c).zip(dy.data().chunks(c)).zip(dx.data_mut().chunks_mut(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let d = inv_std.len();
                let rows = xhat.len() / d;
                let g = val(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (hr, gr) in xhat.chunks(d).zip(dy.data().chunks(d)) {
                    for c in 0..d {
                        dgamma[c] += gr[c] * hr[c];
                        dbeta[c] += gr[c];
                    }
                }
                let mut dx = Tensor::zeros(dy.shape());
                let n = rows as f64;
                for ((hr, gr), dr) in
                    xhat.chunks(d).zip(dy.data().chunks(d)).zip(dx.data_mut().chunks_mut(d))
                {
                    for c in 0..d {
                        dr[c] = if *batch_stats {
                            // d/dx of gamma * (x - mean) / std with batch mean and variance.
                            g[c] * inv_std[c] * (gr[c] - dbeta[c] / n - hr[c] * dgamma[c] / n)
                        } else {
                            g[c] * inv_std[c] * gr[c]
                        };
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::new(&[d], dgamma).unwrap()),
                    (*beta, Tensor::new(&[d], dbeta).unwrap()),
                ]
            }
            Op::Bmm { a, b, trans_a, trans_b, dims } => {
                let [batch, m, k, n] = *dims;
                let (av, bv) = (val(*a), val(*b));
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for i in 0..batch {
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let gi = &dy.data()[i * m * n..(i + 1) * m * n];
                    let dai = &mut da.data_mut()[i * m * k..(i + 1) * m * k];
                    match (trans_a, trans_b) {
                        (false, false) => gemm_bt(gi, bi, dai, m, n, k),
                        (false, true) => gemm(gi, bi, dai, m, n, k),
                        (true, false) => gemm_bt(bi, gi, dai, k, n, m),
                        (true, true) => unreachable!(),
                    }
                    let dbi = &mut db.data_mut()[i * k * n..(i + 1) * k * n];
                    match (trans_a, trans_b) {
                        (false, false) => gemm_at(ai, gi, dbi, m, k, n),
                        (false, true) => gemm_at(gi, ai, dbi, m, n, k),
                        (true, false) => gemm(ai, gi, dbi, k, m, n),
                        (true, true) => unreachable!(),
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Reshape(x) => {
                vec![(*x, dy.clone().reshape(val(*x).shape()).unwrap())]
            }
            Op::GatherRows { src, idx } => {
                let sv = val(*src);
                let c = sv.cols();
                let mut ds = Tensor::zeros(sv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let gr = &dy.data()[r * c..(r + 1) * c];
                    for (d, g) in ds.row_mut(i).iter_mut().zip(gr) {
                        *d += g;
                    }
                }
                vec![(*src, ds)]
            }
            Op::SubCenter { grouped, centers } => {
                let s = val(*grouped).shape();
                let (k, c) = (s[1], s[2]);
                let mut dc = Tensor::zeros(val(*centers).shape());
                for (gi, block) in dy.data().chunks(k * c).enumerate() {
                    let row = dc.row_mut(gi);
                    for gr in block.chunks(c) {
                        for (d, g) in row.iter_mut().zip(gr) {
                            *d -= g;
                        }
                    }
                }
                vec![(*grouped, dy.clone()), (*centers, dc)]
            }
            Op::MaxPool { x, argmax } => {
                let s = val(*x).shape();
                let (k, d) = (s[1], s[2]);
                let mut dx = Tensor::zeros(s);
                for (o, &am) in argmax.iter().enumerate() {
                    let (gi, c) = (o / d, o % d);
                    dx.data_mut()[(gi * k + am) * d + c] += dy.data()[o];
                }
                vec![(*x, dx)]
            }
            Op::SumPool(x) => {
                let s = val(*x).shape();
                let (k, d) = (s[1], s[2]);
                let mut dx = Tensor::zeros(s);
                for (gi, block) in dx.data_mut().chunks_mut(k * d).enumerate() {
                    let gr = &dy.data()[gi * d..(gi + 1) * d];
                    for row in block.chunks_mut(d) {
                        row.copy_from_slice(gr);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Concat { a, b } => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let mut da = Vec::with_capacity(val(*a).len());
                let mut db = Vec::with_capacity(val(*b).len());
                for row in dy.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                vec![
                    (*a, Tensor::new(val(*a).shape(), da).unwrap()),
                    (*b, Tensor::new(val(*b).shape(), db).unwrap()),
                ]
            }
            Op::Dropout { x, mask } => {
                let mut dx = dy.clone();
                for (g, m) in dx.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                vec![(*x, Tensor::filled(val(*x).shape(), g))]
            }
            Op::SumSquares(x) => {
                let g = dy.data()[0];
                vec![(*x, val(*x).map(|v| 2.0 * v * g))]
            }
            Op::CrossEntropy { logits, probs, labels, weights } => {
                let lv = val(*logits);
                let (r, c) = (lv.rows(), lv.cols());
                let g = dy.data()[0] / r as f64;
                let mut dl = Tensor::new(lv.shape(), probs.clone()).unwrap();
                for (i, row) in dl.data_mut().chunks_mut(c).enumerate() {
                    row[labels[i]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= weights[i] * g);
                }
                vec![(*logits, dl)]
            }
            Op::Repulsion { coords, pairs, inv_h2 } => {
                let cv = val(*coords);
                let g = dy.data()[0];
                let mut dc = Tensor::zeros(cv.shape());
                for &(i, j) in pairs {
                    let (xi, xj) = (cv.row(i).to_vec(), cv.row(j).to_vec());
                    let w = (-sq_dist(&xi, &xj) * inv_h2).exp();
                    for c in 0..xi.len() {
                        let d = -2.0 * inv_h2 * w * (xi[c] - xj[c]) * g;
                        dc.row_mut(i)[c] += d;
                        dc.row_mut(j)[c] -= d;
                    }
                }
                vec![(*coords, dc)]
            }
            Op::InterpWeights { dst, src, idx, eps } => {
                let (dv, sv) = (val(*dst), val(*src));
                let mut dd = Tensor::zeros(dv.shape());
                let mut ds = Tensor::zeros(sv.shape());
                for (g, row) in idx.iter().enumerate() {
                    let q = dv.row(g).to_vec();
                    let u = row.map(|j| 1.0 / (sq_dist(&q, sv.row(j)) + eps));
                    let s: f64 = u.iter().sum();
                    let gw = &dy.data()[g * 3..g * 3 + 3];
                    let mean: f64 = (0..3).map(|j| gw[j] * u[j] / s).sum();
                    for (m, &j) in row.iter().enumerate() {
                        // d w / d u_m, then d u_m / d q = -2 u_m^2 (q - k_m).
                        let du = (gw[m] - mean) / s;
                        let k = sv.row(j).to_vec();
                        for c in 0..3 {
                            let d = -2.0 * u[m] * u[m] * (q[c] - k[c]) * du;
                            dd.row_mut(g)[c] += d;
                            ds.row_mut(j)[c] -= d;
                        }
                    }
                }
                vec![(*dst, dd), (*src, ds)]
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable softmax along the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}
