//! Adaptive sampling: attention inside each sampled point's neighborhood, then a
//! learned convex re-weighting that moves the point and its feature.
//!
//! All tensors are batched: a batch of `B` clouds with `N` points each is stored
//! as `[B*N x C]` rows, cloud after cloud. Sampled points and neighbor lists are
//! reported as global row indices into that layout.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{farthest_point_sample, knn_query, random_sample};
use crate::nn::{Dense, LinearMap};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the initial sampled points are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitSampling {
    Fps,
    Random,
}

/// How the shift weights over a neighborhood are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftWeighting {
    /// Learned softmax weights from the attention-updated group features.
    GroupFeature,
    /// Uniform `1/K` weights.
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FpsStart {
    Index(usize),
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SamplingMode {
    pub init: InitSampling,
    pub weighting: ShiftWeighting,
    pub fps_start: FpsStart,
}

impl Default for SamplingMode {
    fn default() -> Self {
        Self {
            init: InitSampling::Fps,
            weighting: ShiftWeighting::GroupFeature,
            fps_start: FpsStart::Index(0),
        }
    }
}

impl fmt::Display for InitSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitSampling::Fps => "fps",
            InitSampling::Random => "random",
        })
    }
}

impl fmt::Display for ShiftWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftWeighting::GroupFeature => "group-feature",
            ShiftWeighting::Average => "average",
        })
    }
}

impl SamplingMode {
    /// `init+weighting`, e.g. `fps+group-feature`.
    pub fn label(&self) -> String {
        format!("{}+{}", self.init, self.weighting)
    }
}

/// Intermediate attention width: the input width when it is at least 32, else 32.
pub fn attention_width(d_in: usize) -> usize {
    d_in.max(32)
}

/// Two per-point layers `[D' -> D' -> 1]` with ReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreHead {
    pub hidden: Dense,
    pub out: LinearMap,
}

impl ScoreHead {
    fn init(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            hidden: Dense::init(store, &format!("{name}.0"), d, d, false, true, rng)?,
            // A constant offset would not change the softmax over the group.
            out: LinearMap::init_unbiased(store, &format!("{name}.1"), d, 1, rng)?,
        })
    }

    /// Scores `[G x K x D']` into `[G x K]`.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let h = self.hidden.apply(tape, x)?;
        let o = self.out.apply(tape, h)?;
        tape.reshape(o, &s[..2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsParams {
    pub phi: LinearMap,
    pub theta: LinearMap,
    pub gamma: LinearMap,
    pub sigma_p: ScoreHead,
    pub sigma_f: ScoreHead,
    /// Maps the shifted feature `[D']` back to the layer input width.
    pub out_proj: LinearMap,
    pub d_in: usize,
    pub d_attn: usize,
}

impl AsParams {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, rng: &mut impl Rng) -> Result<Self> {
        let d_attn = attention_width(d_in);
        Ok(Self {
            phi: LinearMap::init(store, &format!("{name}.phi"), d_in, d_attn, rng)?,
            theta: LinearMap::init_unbiased(store, &format!("{name}.theta"), d_in, d_attn, rng)?,
            gamma: LinearMap::init(store, &format!("{name}.gamma"), d_in, d_attn, rng)?,
            sigma_p: ScoreHead::init(store, &format!("{name}.sigma_p"), d_attn, rng)?,
            sigma_f: ScoreHead::init(store, &format!("{name}.sigma_f"), d_attn, rng)?,
            out_proj: LinearMap::init(store, &format!("{name}.out_proj"), d_attn, d_in, rng)?,
            d_in,
            d_attn,
        })
    }
}

/// Result of [`group_self_attention`].
#[derive(Clone, Copy, Debug)]
pub struct GroupAttention {
    /// `[G x K x D']`.
    pub feats: Var,
    /// `[G x K x K]`, rows sum to one.
    pub attn: Var,
}

/// Scaled dot-product self-attention among the `K` members of every group.
///
/// `group_feats` is `[G x K x D]`; member `k` becomes
/// `sum_j softmax_j(phi(f_k) . theta(f_j) / sqrt(D')) gamma(f_j)`.
pub fn group_self_attention(tape: &mut Tape, group_feats: Var, p: &AsParams) -> Result<GroupAttention> {
    let s = tape.shape(group_feats).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("group features must be [G x K x D], got {s:?}")));
    }
    if s[1] == 0 {
        return Err(Error::Empty("group has no members".into()));
    }
    let q = p.phi.apply(tape, group_feats)?;
    let k = p.theta.apply(tape, group_feats)?;
    let v = p.gamma.apply(tape, group_feats)?;
    let scores = tape.bmm(q, k, false, true)?;
    let scores = tape.scale(scores, 1.0 / (p.d_attn as f64).sqrt());
    let attn = tape.softmax(scores);
    let feats = tape.bmm(attn, v, false, false)?;
    Ok(GroupAttention { feats, attn })
}

/// Shifted coordinates and features with the weights that produced them.
#[derive(Clone, Debug)]
pub struct AsOutput {
    /// `[G x 3]`.
    pub new_coords: Var,
    /// `[G x D']` after adaptive shifting, or the raw `[G x D]` features when AS is disabled.
    pub new_feats: Var,
    /// `[G x K x K]`.
    pub attn_weights: Option<Var>,
    /// `[G x K]` coordinate shift weights.
    pub shift_weights_p: Option<Var>,
    /// `[G x K]` feature shift weights.
    pub shift_weights_f: Option<Var>,
    /// Global row index of every initially sampled point.
    pub sampled: Vec<usize>,
    /// Global row indices of every sampled point's neighbors (empty when AS is disabled).
    pub neighbors: Vec<Vec<usize>>,
}

/// Convex re-weighting of neighbor coordinates `[G x K x 3]` and updated
/// features `[G x K x D']`: `x* = W_p^T X`, `f* = W_f^T F`.
pub fn adaptive_shift(
    tape: &mut Tape,
    neighbor_coords: Var,
    updated_feats: Var,
    p: &AsParams,
    weighting: ShiftWeighting,
) -> Result<AsOutput> {
    let sc = tape.shape(neighbor_coords).to_vec();
    let sf = tape.shape(updated_feats).to_vec();
    if sc.len() != 3 || sc[2] != 3 || sf.len() != 3 || sf[..2] != sc[..2] || sf[2] != p.d_attn {
        return Err(Error::Dimension(format!(
            "adaptive_shift: coords {sc:?}, features {sf:?}, expected width {}",
            p.d_attn
        )));
    }
    let (g, k) = (sc[0], sc[1]);
    let (wp, wf) = match weighting {
        ShiftWeighting::GroupFeature => {
            let fp = p.sigma_p.apply(tape, updated_feats)?;
            let ff = p.sigma_f.apply(tape, updated_feats)?;
            (tape.softmax(fp), tape.softmax(ff))
        }
        ShiftWeighting::Average => {
            let u = tape.constant(Tensor::filled(&[g, k], 1.0 / k as f64));
            (u, u)
        }
    };
    let wp3 = tape.reshape(wp, &[g, 1, k])?;
    let wf3 = tape.reshape(wf, &[g, 1, k])?;
    let x = tape.bmm(wp3, neighbor_coords, false, false)?;
    let x = tape.reshape(x, &[g, 3])?;
    let f = tape.bmm(wf3, updated_feats, false, false)?;
    let f = tape.reshape(f, &[g, p.d_attn])?;
    Ok(AsOutput {
        new_coords: x,
        new_feats: f,
        attn_weights: None,
        shift_weights_p: Some(wp),
        shift_weights_f: Some(wf),
        sampled: Vec::new(),
        neighbors: Vec::new(),
    })
}

/// Row block `[b*n, (b+1)*n)` of a `[B*n x C]` value.
pub(crate) fn cloud_block(t: &Tensor, b: usize, n: usize) -> Tensor {
    let c = t.cols();
    Tensor::new(&[n, c], t.data()[b * n * c..(b + 1) * n * c].to_vec()).expect("valid block")
}

/// Initial sampling per cloud, as global row indices.
pub fn initial_sample(
    tape: &mut Tape,
    coords: &Tensor,
    batch: usize,
    n_out: usize,
    mode: &SamplingMode,
) -> Result<Vec<usize>> {
    let n = coords.rows() / batch;
    let mut out = Vec::with_capacity(batch * n_out);
    for b in 0..batch {
        let local = match mode.init {
            InitSampling::Fps => {
                let block = cloud_block(coords, b, n);
                let start = match mode.fps_start {
                    FpsStart::Index(i) => i,
                    FpsStart::Random => tape.rng().random_range(0..n),
                };
                farthest_point_sample(&block, n_out, start)?
            }
            InitSampling::Random => random_sample(n, n_out, tape.rng())?,
        };
        out.extend(local.into_iter().map(|i| i + b * n));
    }
    Ok(out)
}

/// `k` nearest neighbors (within each cloud) of `centers[B*M x 3]` among
/// `keys[B*N x 3]`, as global row indices into `keys`.
///
/// Each row is sorted by index rather than distance, so the order of a group
/// only changes when its membership does.
pub fn batched_knn(centers: &Tensor, keys: &Tensor, batch: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let (m, n) = (centers.rows() / batch, keys.rows() / batch);
    let mut out = Vec::with_capacity(batch * m);
    for b in 0..batch {
        let nn = knn_query(&cloud_block(centers, b, m), &cloud_block(keys, b, n), k)?;
        out.extend(nn.into_iter().map(|mut row| {
            row.sort_unstable();
            row.into_iter().map(|i| i + b * n).collect()
        }));
    }
    Ok(out)
}

/// Full adaptive sampling of a batched layer input.
///
/// `coords` is `[B*N x 3]`, `feats` `[B*N x D]`. With `as_k == 0` (or no parameters)
/// the initially sampled points and their features are passed through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_sample(
    tape: &mut Tape,
    coords: Var,
    feats: Var,
    batch: usize,
    n_out: usize,
    as_k: usize,
    p: Option<&AsParams>,
    mode: &SamplingMode,
) -> Result<AsOutput> {
    let rows = tape.value(coords).rows();
    if batch == 0 || rows % batch != 0 || tape.value(feats).rows() != rows {
        return Err(Error::Dimension(format!(
            "{rows} coordinate rows and {} feature rows do not split into {batch} clouds",
            tape.value(feats).rows()
        )));
    }
    let n = rows / batch;
    if as_k > n {
        return Err(Error::Parameter(format!("as_neighbor {as_k} exceeds {n} input points")));
    }
    let coord_vals = tape.value(coords).clone();
    let sampled = initial_sample(tape, &coord_vals, batch, n_out, mode)?;
    let (p, as_k) = match p {
        Some(p) if as_k > 0 => (p, as_k),
        _ => {
            let new_coords = tape.gather_rows(coords, &sampled)?;
            let new_feats = tape.gather_rows(feats, &sampled)?;
            return Ok(AsOutput {
                new_coords,
                new_feats,
                attn_weights: None,
                shift_weights_p: None,
                shift_weights_f: None,
                sampled,
                neighbors: Vec::new(),
            });
        }
    };
    if tape.value(feats).cols() != p.d_in {
        return Err(Error::Dimension(format!(
            "AS expects {} feature channels, got {}",
            p.d_in,
            tape.value(feats).cols()
        )));
    }
    let centers = coord_vals.select_rows(&sampled)?;
    let neighbors = batched_knn(&centers, &coord_vals, batch, as_k)?;
    let flat: Vec<usize> = neighbors.iter().flatten().copied().collect();
    let g = sampled.len();
    let nb_coords = tape.gather_rows(coords, &flat)?;
    let nb_coords = tape.reshape(nb_coords, &[g, as_k, 3])?;
    let nb_feats = tape.gather_rows(feats, &flat)?;
    let nb_feats = tape.reshape(nb_feats, &[g, as_k, p.d_in])?;
    let att = group_self_attention(tape, nb_feats, p)?;
    let mut out = adaptive_shift(tape, nb_coords, att.feats, p, mode.weighting)?;
    out.attn_weights = Some(att.attn);
    out.sampled = sampled;
    out.neighbors = neighbors;
    Ok(out)
}
