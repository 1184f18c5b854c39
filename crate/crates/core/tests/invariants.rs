//! Invariants of the learned operators and the joint objective.

use pcnet_core::cell::{pl_cell, pnl_cell, Aggregation, PlParams, PnlParams};
use pcnet_core::experiment::ExperimentConfig;
use pcnet_core::geom::knn_query;
use pcnet_core::network::loss::{repulsion_loss, total_loss, LossConfig, KernelScale};
use pcnet_core::sampling::{adaptive_sample, adaptive_shift, group_self_attention, AsParams, SamplingMode, ShiftWeighting};
use pcnet_core::tape::softmax_rows;
use pcnet_core::{Mode, ParamStore, PointCloud, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tape(store: &ParamStore) -> Tape<'_> {
    Tape::new(store, Mode::Eval, ChaCha8Rng::seed_from_u64(0))
}

/// Reorders the members of every group of a `[G x K x C]` tensor by `perm`.
fn permute_members(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let (g, k, c) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(t.len());
    for gi in 0..g {
        for &m in perm {
            let at = (gi * k + m) * c;
            out.extend_from_slice(&t.data()[at..at + c]);
        }
    }
    Tensor::new(s, out).unwrap()
}

fn assert_probability_rows(t: &Tensor, tol: f64) {
    for row in t.data().chunks(t.cols()) {
        assert!(row.iter().all(|&w| w >= 0.0), "negative weight in {row:?}");
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= tol);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn adaptive_sampling_is_convex_and_normalized(seed in any::<u64>(), n in 8usize..40, d in 1usize..6, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = AsParams::init(&mut store, "as", d, &mut rng).unwrap();
        let batch = 2;
        let coords = random(&[batch * n, 3], &mut rng);
        let feats = random(&[batch * n, d], &mut rng);
        let m = rng.random_range(1..=n);
        let mut t = tape(&store);
        let (c, f) = (t.constant(coords.clone()), t.constant(feats));
        let out = adaptive_sample(&mut t, c, f, batch, m, k, Some(&p), &SamplingMode::default()).unwrap();

        let attn = t.value(out.attn_weights.unwrap()).clone();
        prop_assert_eq!(attn.shape(), &[batch * m, k, k]);
        assert_probability_rows(&attn, 1e-9);
        let wp = t.value(out.shift_weights_p.unwrap()).clone();
        assert_probability_rows(&wp, 1e-9);
        assert_probability_rows(t.value(out.shift_weights_f.unwrap()), 1e-9);

        // The shift weights are a convex-combination certificate for each new point.
        let new = t.value(out.new_coords);
        for (i, nb) in out.neighbors.iter().enumerate() {
            prop_assert_eq!(nb.len(), k);
            for a in 0..3 {
                let combo: f64 = nb.iter().enumerate().map(|(j, &r)| wp.get(&[i, j]) * coords.get(&[r, a])).sum();
                prop_assert!((combo - new.get(&[i, a])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_shift_ignores_member_order(seed in any::<u64>(), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = AsParams::init(&mut store, "as", 4, &mut rng).unwrap();
        let x = random(&[3, 6, 3], &mut rng);
        let f = random(&[3, 6, 4], &mut rng);
        let run = |x: Tensor, f: Tensor, w: ShiftWeighting| {
            let mut t = tape(&store);
            let (xv, fv) = (t.constant(x), t.constant(f));
            let att = group_self_attention(&mut t, fv, &p).unwrap();
            let out = adaptive_shift(&mut t, xv, att.feats, &p, w).unwrap();
            (t.value(out.new_coords).clone(), t.value(out.new_feats).clone())
        };
        for w in [ShiftWeighting::GroupFeature, ShiftWeighting::Average] {
            let (c0, f0) = run(x.clone(), f.clone(), w);
            let (c1, f1) = run(permute_members(&x, &perm), permute_members(&f, &perm), w);
            prop_assert!(c0.max_abs_diff(&c1) < 1e-10);
            prop_assert!(f0.max_abs_diff(&f1) < 1e-10);
        }
    }

    #[test]
    fn nonlocal_cell_ignores_key_order(seed in any::<u64>(), perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = PnlParams::init(&mut store, "pnl", 5, 8, 7, &mut rng).unwrap();
        let q = random(&[4, 5], &mut rng);
        let keys = random(&[12, 5], &mut rng);
        let permuted = keys.select_rows(&perm).unwrap();
        let mut t = tape(&store);
        let qv = t.constant(q);
        let (k0, k1) = (t.constant(keys), t.constant(permuted));
        let (a, _) = pnl_cell(&mut t, qv, k0, 1, &p).unwrap();
        let (b, attn) = pnl_cell(&mut t, qv, k1, 1, &p).unwrap();
        prop_assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-10);
        let attn = t.value(attn).clone().reshape(&[4, 12]).unwrap();
        assert_probability_rows(&attn, 1e-12);
    }

    #[test]
    fn singleton_key_gives_sigma_of_gamma(seed in any::<u64>(), d in 1usize..8, queries in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = PnlParams::init(&mut store, "pnl", d, 8, d + 3, &mut rng).unwrap();
        let mut t = tape(&store);
        let q = t.constant(random(&[queries, d], &mut rng));
        let k = t.constant(random(&[1, d], &mut rng));
        let (out, _) = pnl_cell(&mut t, q, k, 1, &p).unwrap();
        let g = p.gamma.apply(&mut t, k).unwrap();
        let expect = p.sigma.apply(&mut t, g).unwrap();
        for r in 0..queries {
            for (a, b) in t.value(out).row(r).iter().zip(t.value(expect).row(0)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn local_cell_ignores_neighbor_order(seed in any::<u64>(), max in any::<bool>(), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let agg = if max { Aggregation::Max } else { Aggregation::Sum };
        let p = PlParams::init(&mut store, "pl", 3, 8, agg, &mut rng).unwrap();
        let rel = random(&[4, 5, 3], &mut rng);
        let f = random(&[4, 5, 3], &mut rng);
        let mut t = tape(&store);
        let (r0, f0) = (t.constant(rel.clone()), t.constant(f.clone()));
        let (r1, f1) = (t.constant(permute_members(&rel, &perm)), t.constant(permute_members(&f, &perm)));
        let a = pl_cell(&mut t, r0, f0, &p).unwrap();
        let b = pl_cell(&mut t, r1, f1, &p).unwrap();
        prop_assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-10);
    }

    #[test]
    fn softmax_is_shift_invariant(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 4), 1..6), c in -100.0f64..100.0) {
        let x = Tensor::from_rows(&rows).unwrap();
        let p = softmax_rows(&x);
        assert_probability_rows(&p, 1e-12);
        prop_assert!(p.max_abs_diff(&softmax_rows(&x.map(|v| v + c))) < 1e-12);
    }
}

#[test]
fn kernel_weight_at_scale_is_inverse_e() {
    for h in [0.05, 0.3, 1.0, 7.5] {
        let store = ParamStore::new();
        let mut t = tape(&store);
        let c = t.constant(Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, h, 0.0, 0.0]).unwrap());
        let rep = repulsion_loss(&mut t, c, 1, 1, h).unwrap();
        // Both directed pairs contribute one kernel value.
        assert!((t.value(rep).data()[0] / 2.0 - (-1.0f64).exp()).abs() <= 1e-12);
    }
}

fn stable_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut acc = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        acc += lse - row[l];
    }
    acc / labels.len() as f64
}

fn repulsion_by_hand(coords: &Tensor, k: usize, h: f64) -> f64 {
    let nn = knn_query(coords, coords, k + 1).unwrap();
    let mut acc = 0.0;
    for (i, row) in nn.iter().enumerate() {
        for &j in row.iter().filter(|&&j| j != i).take(k) {
            let r2: f64 = (0..3).map(|a| (coords.get(&[i, a]) - coords.get(&[j, a])).powi(2)).sum();
            acc += (-r2 / (h * h)).exp();
        }
    }
    acc
}

#[test]
fn total_loss_matches_independent_terms() {
    let cfg = ExperimentConfig::parse(
        "n_points=48\nlayer1=16 8 4 16,16\nlayer2=8 8 4 16,32\nglobal=32,64\nhead=32\n",
        &[],
    )
    .unwrap();
    let (model, store) = cfg.build_model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clouds: Vec<PointCloud> = (0..3).map(|_| PointCloud::new(random(&[48, 3], &mut rng), None, None).unwrap()).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let labels = [0, 3, 1];
    for (alpha, beta, h) in [(0.01, 1e-5, 0.4), (0.01, 0.0, 0.1), (0.0, 1e-3, 1.0)] {
        let loss = LossConfig { alpha, beta, k_rep: 4, h: KernelScale::Fixed(h), class_weights: None };
        let mut t = tape(&store);
        let out = model.forward(&mut t, &refs, false).unwrap();
        let terms = total_loss(&mut t, &out, &labels, &loss).unwrap();

        let ce = stable_ce(t.value(out.logits), &labels);
        let first = t.value(out.first_layer().0).clone();
        let n = out.first_layer().1;
        let rep: f64 = (0..3)
            .map(|b| repulsion_by_hand(&Tensor::new(&[n, 3], first.data()[b * n * 3..(b + 1) * n * 3].to_vec()).unwrap(), 4, h))
            .sum::<f64>()
            / 3.0;
        let wd: f64 = store.trainable_names().iter().map(|p| store.value(p).unwrap().data().iter().map(|v| v * v).sum::<f64>()).sum();
        let expect = ce + alpha * rep + beta * wd;
        let got = t.value(terms.total).data()[0];
        assert!((got - expect).abs() <= 1e-10, "total {got} vs {expect}");
        assert!((t.value(terms.ce).data()[0] - ce).abs() <= 1e-10);
    }
}
