//! Local-nonlocal cells.
//!
//! The local cell turns each relative neighbor position into a `D_l x D_mid`
//! matrix and aggregates the transformed neighbor features. The nonlocal cell
//! lets every query attend to all key points of the layer. Their outputs are
//! fused by a channel-wise sum followed by a projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Dense, LinearMap};
use crate::params::ParamStore;
use crate::sampling::batched_knn;
use crate::tape::{Tape, Var};

/// Hidden width of the position-to-weight network.
pub const WEIGHT_NET_HIDDEN: usize = 16;

/// Reduction over the neighbors of the local cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Sum,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlParams {
    /// `3 -> 16`, ReLU.
    pub weight_hidden: Dense,
    /// `16 -> D_l * D_mid`; row-major `D_l x D_mid` matrix per neighbor.
    pub weight_out: LinearMap,
    /// `D_mid -> D_{l+1}` with batch-norm and ReLU.
    pub post: Dense,
    pub d_in: usize,
    pub d_mid: usize,
    pub d_out: usize,
    pub aggregation: Aggregation,
}

impl PlParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        aggregation: Aggregation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d_mid = (d_out / 2).max(1);
        Ok(Self {
            weight_hidden: Dense::init(
                store,
                &format!("{name}.g0"),
                3,
                WEIGHT_NET_HIDDEN,
                false,
                true,
                rng,
            )?,
            weight_out: LinearMap::init(store, &format!("{name}.g1"), WEIGHT_NET_HIDDEN, d_in * d_mid, rng)?,
            post: Dense::init(store, &format!("{name}.post"), d_mid, d_out, true, true, rng)?,
            d_in,
            d_mid,
            d_out,
            aggregation,
        })
    }
}

/// Aggregated `sum_n g(x_n - x_i)^T f_n` (or the channel max for [`Aggregation::Max`]),
/// `[G x D_mid]`, before the post projection.
///
/// `rel_coords` is `[G x K x 3]`, `group_feats` `[G x K x D_l]`. For the sum the
/// last layer of `g` is affine, so the product is factored through the hidden
/// activations: `sum_n z_n^T (f_n W)` reorganizes to `(sum_n z_n f_n^T) W`, which
/// avoids materializing a matrix per neighbor.
pub fn pl_aggregate(tape: &mut Tape, rel_coords: Var, group_feats: Var, p: &PlParams) -> Result<Var> {
    let sr = tape.shape(rel_coords).to_vec();
    let sf = tape.shape(group_feats).to_vec();
    if sr.len() != 3 || sr[2] != 3 || sf.len() != 3 || sf[..2] != sr[..2] || sf[2] != p.d_in {
        return Err(Error::Dimension(format!(
            "pl cell: rel coords {sr:?}, features {sf:?}, expected width {}",
            p.d_in
        )));
    }
    let (g, k) = (sr[0], sr[1]);
    if k == 0 {
        return Err(Error::Empty("local group has no neighbors".into()));
    }
    let z = p.weight_hidden.apply(tape, rel_coords)?;
    let w = tape.param(&p.weight_out.weight)?;
    let b = tape.param(p.weight_out.bias.as_deref().expect("weight net output has a bias"))?;
    match p.aggregation {
        Aggregation::Sum => {
            let s = tape.bmm(z, group_feats, true, false)?;
            let s = tape.reshape(s, &[g, WEIGHT_NET_HIDDEN * p.d_in])?;
            let wr = tape.reshape(w, &[WEIGHT_NET_HIDDEN * p.d_in, p.d_mid])?;
            let t1 = tape.matmul(s, wr)?;
            let fsum = tape.sum_pool(group_feats)?;
            let br = tape.reshape(b, &[p.d_in, p.d_mid])?;
            let t2 = tape.matmul(fsum, br)?;
            tape.add(t1, t2)
        }
        Aggregation::Max => {
            let gm = tape.matmul(z, w)?;
            let gm = tape.add_bias(gm, b)?;
            let gm = tape.reshape(gm, &[g * k, p.d_in, p.d_mid])?;
            let f = tape.reshape(group_feats, &[g * k, 1, p.d_in])?;
            let y = tape.bmm(f, gm, false, false)?;
            let y = tape.reshape(y, &[g, k, p.d_mid])?;
            tape.max_pool(y)
        }
    }
}

/// Local cell: aggregation followed by the post projection, `[G x D_{l+1}]`.
pub fn pl_cell(tape: &mut Tape, rel_coords: Var, group_feats: Var, p: &PlParams) -> Result<Var> {
    let a = pl_aggregate(tape, rel_coords, group_feats, p)?;
    p.post.apply(tape, a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnlParams {
    pub phi: LinearMap,
    pub theta: LinearMap,
    pub gamma: LinearMap,
    /// `D' -> D_{l+1}` with batch-norm and ReLU.
    pub sigma: Dense,
    pub d_in: usize,
    pub d_attn: usize,
    pub d_out: usize,
}

impl PnlParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_attn: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_out < d_in {
            return Err(Error::Config(format!(
                "nonlocal cell `{name}` would shrink channels {d_in} -> {d_out}"
            )));
        }
        Ok(Self {
            phi: LinearMap::init(store, &format!("{name}.phi"), d_in, d_attn, rng)?,
            // Key biases shift every score of a query equally; the gamma bias is
            // removed by the batch-norm in sigma.
            theta: LinearMap::init_unbiased(store, &format!("{name}.theta"), d_in, d_attn, rng)?,
            gamma: LinearMap::init_unbiased(store, &format!("{name}.gamma"), d_in, d_attn, rng)?,
            sigma: Dense::init(store, &format!("{name}.sigma"), d_attn, d_out, true, true, rng)?,
            d_in,
            d_attn,
            d_out,
        })
    }
}

/// Attention of queries over keys before `sigma`.
#[derive(Clone, Copy, Debug)]
pub struct NonlocalContext {
    /// `[B*N_s x D']`.
    pub context: Var,
    /// `[B x N_s x N]`.
    pub attn: Var,
}

/// `sum_j softmax_j(phi(q_i) . theta(k_j) / sqrt(D')) gamma(k_j)`, per cloud.
///
/// `query_feats` is `[B*N_s x D_l]`, `key_feats` `[B*N x D_l]`.
pub fn pnl_attend(
    tape: &mut Tape,
    query_feats: Var,
    key_feats: Var,
    batch: usize,
    p: &PnlParams,
) -> Result<NonlocalContext> {
    let (qr, kr) = (tape.value(query_feats).rows(), tape.value(key_feats).rows());
    if kr == 0 {
        return Err(Error::Empty("nonlocal cell needs key points".into()));
    }
    if batch == 0 || qr % batch != 0 || kr % batch != 0 {
        return Err(Error::Dimension(format!("{qr} queries / {kr} keys over {batch} clouds")));
    }
    let (ns, n) = (qr / batch, kr / batch);
    let q = p.phi.apply(tape, query_feats)?;
    let q = tape.reshape(q, &[batch, ns, p.d_attn])?;
    let k = p.theta.apply(tape, key_feats)?;
    let k = tape.reshape(k, &[batch, n, p.d_attn])?;
    let v = p.gamma.apply(tape, key_feats)?;
    let v = tape.reshape(v, &[batch, n, p.d_attn])?;
    let s = tape.bmm(q, k, false, true)?;
    let s = tape.scale(s, 1.0 / (p.d_attn as f64).sqrt());
    let attn = tape.softmax(s);
    let ctx = tape.bmm(attn, v, false, false)?;
    let context = tape.reshape(ctx, &[batch * ns, p.d_attn])?;
    Ok(NonlocalContext { context, attn })
}

/// Nonlocal cell `sigma(NL(x_i, P_k))`, `[B*N_s x D_{l+1}]`.
pub fn pnl_cell(
    tape: &mut Tape,
    query_feats: Var,
    key_feats: Var,
    batch: usize,
    p: &PnlParams,
) -> Result<(Var, Var)> {
    let nl = pnl_attend(tape, query_feats, key_feats, batch, p)?;
    Ok((p.sigma.apply(tape, nl.context)?, nl.attn))
}

#[derive(Clone, Debug)]
pub struct LnlOutput {
    pub feats: Var,
    /// `[B x N_s x N]` nonlocal attention, when requested.
    pub diagnostics: Option<Var>,
}

/// `ReLU(BN(fuse(local + nonlocal)))`; either branch may be absent for ablations.
pub fn lnl_fuse(
    tape: &mut Tape,
    local: Option<Var>,
    nonlocal: Option<Var>,
    fuse_map: &Dense,
) -> Result<Var> {
    let x = match (local, nonlocal) {
        (Some(l), Some(n)) => tape.add(l, n)?,
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Err(Error::Config("fusion needs at least one branch".into())),
    };
    fuse_map.apply(tape, x)
}

/// A complete local-nonlocal block: kNN grouping around the queries, the local
/// and nonlocal cells, and fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct LnlBlock {
    pub pl: Option<PlParams>,
    pub pnl: Option<PnlParams>,
    pub fuse: Dense,
    pub nsample: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LnlBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_attn: usize,
        d_out: usize,
        nsample: usize,
        use_pl: bool,
        use_pnl: bool,
        aggregation: Aggregation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !use_pl && !use_pnl {
            return Err(Error::Config(format!("block `{name}` has neither cell enabled")));
        }
        if use_pl && nsample == 0 {
            return Err(Error::Config(format!("block `{name}` needs nsample >= 1")));
        }
        let pl = use_pl
            .then(|| PlParams::init(store, &format!("{name}.pl"), d_in, d_out, aggregation, rng))
            .transpose()?;
        let pnl = use_pnl
            .then(|| PnlParams::init(store, &format!("{name}.pnl"), d_in, d_attn, d_out, rng))
            .transpose()?;
        let fuse = Dense::init(store, &format!("{name}.fuse"), d_out, d_out, true, true, rng)?;
        Ok(Self { pl, pnl, fuse, nsample, d_in, d_out })
    }

    /// Runs the block for batched queries `[B*N_s x 3]`/`[B*N_s x D_l]` against the
    /// layer's key points `[B*N x 3]`/`[B*N x D_l]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        query_coords: Var,
        query_feats: Var,
        key_coords: Var,
        key_feats: Var,
        batch: usize,
        emit_attention: bool,
    ) -> Result<LnlOutput> {
        let local = match &self.pl {
            Some(pl) => {
                let n = tape.value(key_coords).rows() / batch;
                let k = self.nsample.min(n);
                let idx = batched_knn(tape.value(query_coords), tape.value(key_coords), batch, k)?;
                let flat: Vec<usize> = idx.iter().flatten().copied().collect();
                let g = idx.len();
                let gc = tape.gather_rows(key_coords, &flat)?;
                let gc = tape.reshape(gc, &[g, k, 3])?;
                let rel = tape.sub_center(gc, query_coords)?;
                let gf = tape.gather_rows(key_feats, &flat)?;
                let gf = tape.reshape(gf, &[g, k, self.d_in])?;
                Some(pl_cell(tape, rel, gf, pl)?)
            }
            None => None,
        };
        let (nonlocal, attn) = match &self.pnl {
            Some(pnl) => {
                let (o, a) = pnl_cell(tape, query_feats, key_feats, batch, pnl)?;
                (Some(o), Some(a))
            }
            None => (None, None),
        };
        let feats = lnl_fuse(tape, local, nonlocal, &self.fuse)?;
        Ok(LnlOutput { feats, diagnostics: if emit_attention { attn } else { None } })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_weight_net_returns_neighbor_feature() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PlParams::init(&mut store, "pl", 3, 6, Aggregation::Sum, &mut rng).unwrap();
        // d_mid = 3: g emits the 3x3 identity regardless of position.
        store.set_value(&p.weight_out.weight, Tensor::zeros(&[16, 9])).unwrap();
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        store.set_value(p.weight_out.bias.as_ref().unwrap(), Tensor::new(&[9], eye).unwrap()).unwrap();
        let mut tape = Tape::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let rel = tape.constant(random(&[2, 1, 3], 2));
        let f = tape.constant(random(&[2, 1, 3], 3));
        for agg in [Aggregation::Sum, Aggregation::Max] {
            let q = PlParams { aggregation: agg, ..p.clone() };
            let out = pl_aggregate(&mut tape, rel, f, &q).unwrap();
            assert!(tape.value(out).data().iter().zip(tape.value(f).data()).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_weight_net_ignores_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PlParams::init(&mut store, "pl", 4, 4, Aggregation::Sum, &mut rng).unwrap();
        store.set_value(&p.weight_out.weight, Tensor::zeros(&[16, 8])).unwrap();
        let mut tape = Tape::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let rel = tape.constant(random(&[3, 2, 3], 2));
        let f1 = tape.constant(random(&[3, 2, 4], 3));
        let f2 = tape.constant(random(&[3, 2, 4], 4));
        let o1 = pl_cell(&mut tape, rel, f1, &p).unwrap();
        let o2 = pl_cell(&mut tape, rel, f2, &p).unwrap();
        assert_eq!(tape.value(o1), tape.value(o2));
    }

    #[test]
    fn singleton_key_reduces_to_sigma_gamma() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PnlParams::init(&mut store, "pnl", 4, 8, 6, &mut rng).unwrap();
        let mut tape = Tape::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let q = tape.constant(random(&[5, 4], 2));
        let k = tape.constant(random(&[1, 4], 3));
        let (out, _) = pnl_cell(&mut tape, q, k, 1, &p).unwrap();
        let gk = p.gamma.apply(&mut tape, k).unwrap();
        let sg = p.sigma.apply(&mut tape, gk).unwrap();
        for r in 0..5 {
            for (a, b) in tape.value(out).row(r).iter().zip(tape.value(sg).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shrinking_nonlocal_cell_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(PnlParams::init(&mut store, "pnl", 8, 8, 4, &mut rng).is_err());
    }

    #[test]
    fn fuse_cancellation_and_local_only() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fuse = Dense::init(&mut store, "fuse", 3, 3, false, true, &mut rng).unwrap();
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        store.set_value(&fuse.linear.weight, eye).unwrap();
        store.set_value(fuse.linear.bias.as_ref().unwrap(), Tensor::new(&[3], vec![0.5, -0.5, 0.0]).unwrap()).unwrap();
        let mut tape = Tape::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let l = tape.constant(random(&[4, 3], 2));
        let neg = tape.scale(l, -1.0);
        let out = lnl_fuse(&mut tape, Some(l), Some(neg), &fuse).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(out).row(r), &[0.5, 0.0, 0.0]);
        }
        let zero = tape.constant(Tensor::zeros(&[4, 3]));
        let with_zero = lnl_fuse(&mut tape, Some(l), Some(zero), &fuse).unwrap();
        let only = lnl_fuse(&mut tape, Some(l), None, &fuse).unwrap();
        assert_eq!(tape.value(with_zero), tape.value(only));
        assert!(lnl_fuse(&mut tape, None, None, &fuse).is_err());
    }
}
