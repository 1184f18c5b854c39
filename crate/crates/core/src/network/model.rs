use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::cell::LnlBlock;
use crate::error::{Error, Result};
use crate::geom::{knn_query, PointCloud, INTERP_EPS};
use crate::nn::{Dense, LinearMap, Mlp};
use crate::params::ParamStore;
use crate::sampling::{adaptive_sample, cloud_block, AsOutput, AsParams, SamplingMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::config::{LayerConfig, ModelConfig, Task};

static MAX_INTERP_ERROR: AtomicU64 = AtomicU64::new(0);

/// Largest `|sum(w) - 1|` of any segmenter forward pass in this process.
pub fn max_interp_weight_error() -> f64 {
    f64::from_bits(MAX_INTERP_ERROR.load(Ordering::Relaxed))
}

/// One encoder stage: adaptive sampling, an L-NL block and a linear skip path.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub config: LayerConfig,
    pub sampler: Option<AsParams>,
    pub block: LnlBlock,
    pub skip: Option<LinearMap>,
    pub d_in: usize,
}

/// Result of one encoder stage on a batch.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub coords: Var,
    pub feats: Var,
    /// Points per cloud after sampling.
    pub n_points: usize,
    pub sampling: AsOutput,
    pub attention: Option<Var>,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        config: &LayerConfig,
        cfg: &ModelConfig,
        skip: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.d_out() < d_in {
            return Err(Error::Config(format!(
                "layer `{name}` narrows channels from {d_in} to {}",
                config.d_out()
            )));
        }
        let sampler = (cfg.variant.use_as() && config.as_neighbor > 0)
            .then(|| AsParams::init(store, &format!("{name}.as"), d_in, rng))
            .transpose()?;
        let block = LnlBlock::init(
            store,
            &format!("{name}.lnl"),
            d_in,
            config.d_attn(),
            config.d_out(),
            config.nsample,
            true,
            cfg.variant.use_pnl(),
            cfg.aggregation,
            rng,
        )?;
        let skip = skip
            .then(|| LinearMap::init(store, &format!("{name}.skip"), d_in, config.d_out(), rng))
            .transpose()?;
        Ok(Self { config: config.clone(), sampler, block, skip, d_in })
    }

    pub fn d_out(&self) -> usize {
        self.config.d_out()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        coords: Var,
        feats: Var,
        batch: usize,
        mode: &SamplingMode,
        emit_attention: bool,
    ) -> Result<LayerOutput> {
        let n_in = tape.value(coords).rows() / batch;
        let n_s = self.config.npoint.min(n_in);
        let as_k = self.config.as_neighbor.min(n_in);
        let sampling = adaptive_sample(tape, coords, feats, batch, n_s, as_k, self.sampler.as_ref(), mode)?;
        let query_feats = match (&self.sampler, sampling.attn_weights) {
            (Some(p), Some(_)) => p.out_proj.apply(tape, sampling.new_feats)?,
            _ => sampling.new_feats,
        };
        let out = self.block.forward(
            tape,
            sampling.new_coords,
            query_feats,
            coords,
            feats,
            batch,
            emit_attention,
        )?;
        let feats_out = match &self.skip {
            Some(s) => {
                let r = s.apply(tape, query_feats)?;
                tape.add(out.feats, r)?
            }
            None => out.feats,
        };
        Ok(LayerOutput {
            coords: sampling.new_coords,
            feats: feats_out,
            n_points: n_s,
            attention: out.diagnostics,
            sampling,
        })
    }
}

/// Stacks equally sized clouds into `[B*N x 3]` coordinates.
pub fn stack_coords(clouds: &[&PointCloud]) -> Result<Tensor> {
    let first = clouds.first().ok_or_else(|| Error::Empty("batch has no clouds".into()))?;
    let n = first.len();
    let mut data = Vec::with_capacity(clouds.len() * n * 3);
    for c in clouds {
        if c.len() != n {
            return Err(Error::Dimension(format!("batch mixes clouds of {n} and {} points", c.len())));
        }
        data.extend_from_slice(c.coords.data());
    }
    Tensor::new(&[clouds.len() * n, 3], data)
}

/// Forward pass outputs shared by both tasks.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B x C]` for classification, `[B*N x C]` for segmentation.
    pub logits: Var,
    pub batch: usize,
    /// Input coordinates `[B*N x 3]`.
    pub input_coords: Tensor,
    pub layers: Vec<LayerOutput>,
    /// Largest `|sum(w) - 1|` over all decoder interpolation weights (0 for classifiers).
    pub interp_weight_error: f64,
}

impl ForwardOutput {
    /// Adapted coordinates of the first encoder layer and their per-cloud count.
    pub fn first_layer(&self) -> (Var, usize) {
        (self.layers[0].coords, self.layers[0].n_points)
    }
}

/// Classification network: encoder layers, multi-level global pooling and a dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ModelConfig,
    pub encoder: Vec<EncoderLayer>,
    pub global: Mlp,
    pub head: Vec<Dense>,
    pub logits: LinearMap,
}

fn build_encoder(
    store: &mut ParamStore,
    layers: &[LayerConfig],
    cfg: &ModelConfig,
    skip_layers: usize,
    rng: &mut impl Rng,
) -> Result<Vec<EncoderLayer>> {
    let mut d = 3;
    let mut out = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        if i > 0 && l.npoint > layers[i - 1].npoint {
            return Err(Error::Config(format!(
                "layer {} samples {} points from {}",
                i + 1,
                l.npoint,
                layers[i - 1].npoint
            )));
        }
        let layer = EncoderLayer::init(store, &format!("enc{i}"), d, l, cfg, i < skip_layers, rng)?;
        d = layer.d_out();
        out.push(layer);
    }
    Ok(out)
}

fn head_stack(
    store: &mut ParamStore,
    d_in: usize,
    widths: &[usize],
    rng: &mut impl Rng,
) -> Result<(Vec<Dense>, usize)> {
    let mut d = d_in;
    let mut head = Vec::with_capacity(widths.len());
    for (i, &w) in widths.iter().enumerate() {
        head.push(Dense::init(store, &format!("head.{i}"), d, w, true, true, rng)?);
        d = w;
    }
    Ok((head, d))
}

fn apply_head(tape: &mut Tape, head: &[Dense], dropout: f64, mut x: Var) -> Result<Var> {
    for d in head {
        x = d.apply(tape, x)?;
        x = tape.dropout(x, dropout)?;
    }
    Ok(x)
}

impl Classifier {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.layers.len() < 3 {
            return Err(Error::Config("classifier needs at least two abstraction layers plus a global layer".into()));
        }
        let (global_cfg, enc_cfg) = cfg.layers.split_last().expect("non-empty");
        if global_cfg.npoint != 1 {
            return Err(Error::Config(format!(
                "last classifier layer must be global (npoint 1), got npoint {}",
                global_cfg.npoint
            )));
        }
        let encoder = build_encoder(store, enc_cfg, cfg, 2, rng)?;
        let pooled: usize = encoder.iter().map(EncoderLayer::d_out).sum();
        let global = Mlp::init(store, "global", pooled, &global_cfg.mlp, rng)?;
        let (head, d) = head_stack(store, global.d_out().expect("validated"), &cfg.head, rng)?;
        let logits = LinearMap::init(store, "logits", d, cfg.n_classes, rng)?;
        Ok(Self { config: cfg.clone(), encoder, global, head, logits })
    }

    pub fn forward(&self, tape: &mut Tape, clouds: &[&PointCloud], emit_attention: bool) -> Result<ForwardOutput> {
        let input = stack_coords(clouds)?;
        let batch = clouds.len();
        let mut coords = tape.constant(input.clone());
        let mut feats = coords;
        let mut layers = Vec::with_capacity(self.encoder.len());
        let mut pooled: Option<Var> = None;
        for layer in &self.encoder {
            let out = layer.forward(tape, coords, feats, batch, &self.config.sampling, emit_attention)?;
            let g = tape.reshape(out.feats, &[batch, out.n_points, layer.d_out()])?;
            let p = tape.max_pool(g)?;
            pooled = Some(match pooled {
                Some(acc) => tape.concat(acc, p)?,
                None => p,
            });
            coords = out.coords;
            feats = out.feats;
            layers.push(out);
        }
        let g = self.global.apply(tape, pooled.expect("at least one encoder layer"))?;
        let h = apply_head(tape, &self.head, self.config.dropout, g)?;
        let logits = self.logits.apply(tape, h)?;
        Ok(ForwardOutput { logits, batch, input_coords: input, layers, interp_weight_error: 0.0 })
    }
}

/// One decoder stage at encoder level `level` (0 = input points).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub level: usize,
    pub reduce: Dense,
    pub block: LnlBlock,
}

/// Encoder-decoder segmentation network with 3-nearest interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub config: ModelConfig,
    pub encoder: Vec<EncoderLayer>,
    /// Ordered from the deepest level upwards.
    pub decoder: Vec<DecoderLayer>,
    pub head: Vec<Dense>,
    pub logits: LinearMap,
}

impl Segmenter {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.layers.len() < 2 {
            return Err(Error::Config("segmenter needs at least two encoder layers".into()));
        }
        for w in cfg.layers.windows(2) {
            if w[1].npoint >= w[0].npoint {
                return Err(Error::Config(format!(
                    "segmenter npoint must strictly decrease, got {} then {}",
                    w[0].npoint, w[1].npoint
                )));
            }
        }
        let n_enc = cfg.layers.len();
        let encoder = build_encoder(store, &cfg.layers, cfg, n_enc, rng)?;
        let mut decoder = Vec::with_capacity(n_enc);
        let mut d_cur = encoder[n_enc - 1].d_out();
        for level in (0..n_enc).rev() {
            let (d_skip, width, ref_cfg) = if level == 0 {
                (3, encoder[0].d_out(), &cfg.layers[0])
            } else {
                (encoder[level - 1].d_out(), encoder[level - 1].d_out(), &cfg.layers[level - 1])
            };
            let name = format!("dec{level}");
            let reduce = Dense::init(store, &format!("{name}.reduce"), d_skip + d_cur, width, true, true, rng)?;
            let d_attn = ref_cfg.d_attn().min(width).max(1);
            let block = LnlBlock::init(
                store,
                &format!("{name}.lnl"),
                width,
                d_attn,
                width,
                ref_cfg.nsample.max(1),
                true,
                cfg.variant.use_pnl(),
                cfg.aggregation,
                rng,
            )?;
            decoder.push(DecoderLayer { level, reduce, block });
            d_cur = width;
        }
        let (head, d) = head_stack(store, d_cur, &cfg.head, rng)?;
        let logits = LinearMap::init(store, "logits", d, cfg.n_classes, rng)?;
        Ok(Self { config: cfg.clone(), encoder, decoder, head, logits })
    }

    pub fn forward(&self, tape: &mut Tape, clouds: &[&PointCloud], emit_attention: bool) -> Result<ForwardOutput> {
        let input = stack_coords(clouds)?;
        let batch = clouds.len();
        let n = input.rows() / batch;
        let c0 = tape.constant(input.clone());
        // (coords, feats, points per cloud) of every level, input first.
        let mut levels = vec![(c0, c0, n)];
        let mut layers = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (c, f, _) = *levels.last().expect("non-empty");
            let out = layer.forward(tape, c, f, batch, &self.config.sampling, emit_attention)?;
            levels.push((out.coords, out.feats, out.n_points));
            layers.push(out);
        }
        let (mut cur_coords, mut cur, mut cur_n) = *levels.last().expect("non-empty");
        let mut max_err = 0.0f64;
        for dec in &self.decoder {
            let (tc, tf, tn) = levels[dec.level];
            let (interp, err) = interpolate(tape, tc, tn, cur_coords, cur_n, cur, batch)?;
            max_err = if err.is_nan() { f64::INFINITY } else { max_err.max(err) };
            let cat = tape.concat(tf, interp)?;
            let reduced = dec.reduce.apply(tape, cat)?;
            let out = dec.block.forward(tape, tc, reduced, tc, reduced, batch, false)?;
            cur = tape.add(out.feats, reduced)?;
            cur_coords = tc;
            cur_n = tn;
        }
        let h = apply_head(tape, &self.head, self.config.dropout, cur)?;
        let logits = self.logits.apply(tape, h)?;
        // Bit patterns of non-negative floats order like their values.
        MAX_INTERP_ERROR.fetch_max(max_err.to_bits(), Ordering::Relaxed);
        Ok(ForwardOutput { logits, batch, input_coords: input, layers, interp_weight_error: max_err })
    }
}

/// Inverse-distance interpolation of `src_feats` (on `src_coords`, `sn` points per
/// cloud) onto `dst_coords` (`dn` per cloud), differentiable in features and
/// coordinates. Returns the interpolated features and the largest weight-sum error.
fn interpolate(
    tape: &mut Tape,
    dst_coords: Var,
    dn: usize,
    src_coords: Var,
    sn: usize,
    src_feats: Var,
    batch: usize,
) -> Result<(Var, f64)> {
    if sn < 3 {
        return Err(Error::Parameter(format!("3-nearest interpolation needs at least 3 source points, got {sn}")));
    }
    let d = tape.value(src_feats).cols();
    let (dst, src) = (tape.value(dst_coords), tape.value(src_coords));
    let mut idx = Vec::with_capacity(batch * dn);
    for b in 0..batch {
        let nn = knn_query(&cloud_block(dst, b, dn), &cloud_block(src, b, sn), 3)?;
        idx.extend(nn.into_iter().map(|mut r| {
            r.sort_unstable();
            [r[0] + b * sn, r[1] + b * sn, r[2] + b * sn]
        }));
    }
    let flat: Vec<usize> = idx.iter().flatten().copied().collect();
    let w = tape.interp_weights(dst_coords, src_coords, &idx, INTERP_EPS)?;
    let err = tape
        .value(w)
        .data()
        .chunks(3)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let g = batch * dn;
    let gathered = tape.gather_rows(src_feats, &flat)?;
    let gathered = tape.reshape(gathered, &[g, 3, d])?;
    let wt = tape.reshape(w, &[g, 1, 3])?;
    let out = tape.bmm(wt, gathered, false, false)?;
    Ok((tape.reshape(out, &[g, d])?, err))
}

/// A classifier or segmenter.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Classifier(Classifier),
    Segmenter(Segmenter),
}

impl Model {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        match cfg.task {
            Task::Classification => Classifier::build(store, cfg, rng).map(Model::Classifier),
            Task::Segmentation => Segmenter::build(store, cfg, rng).map(Model::Segmenter),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Classifier(m) => &m.config,
            Model::Segmenter(m) => &m.config,
        }
    }

    pub fn forward(&self, tape: &mut Tape, clouds: &[&PointCloud], emit_attention: bool) -> Result<ForwardOutput> {
        match self {
            Model::Classifier(m) => m.forward(tape, clouds, emit_attention),
            Model::Segmenter(m) => m.forward(tape, clouds, emit_attention),
        }
    }
}
