//! Data protocols, persistence and whole-network behavior.

use pcnet_core::data::{
    augment_with, classification_set, format_cloud, gen_shape, inject_noise, parse_cloud, read_cloud, sparsify,
    write_cloud, AugmentParams, CorruptionSpec, FeatureFill, ShapeKind, ShapeSpec, ToyConfig,
};
use pcnet_core::experiment::{restore, ExperimentConfig};
use pcnet_core::network::Checkpoint;
use pcnet_core::{Mode, PointCloud, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kind() -> impl Strategy<Value = ShapeKind> {
    prop::sample::select(ShapeKind::ALL.to_vec())
}

fn shape(kind: ShapeKind, n: usize, seed: u64) -> PointCloud {
    gen_shape(&ShapeSpec { kind, n_points: n, jitter_sigma: 0.0, seed }).unwrap()
}

const TINY: &str = "n_points=48\nlayer1=16 8 4 16,16\nlayer2=8 8 4 16,32\nglobal=32,64\nhead=32\n";
const TINY_SEG: &str =
    "task=segmentation\nn_points=48\nlayer1=24 8 4 8,16\nlayer2=12 8 4 16,16\nlayer3=6 4 0 16,32\nhead=16\n";

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shapes_are_deterministic_and_labeled(kind in kind(), n in 8usize..200, seed in any::<u64>()) {
        let a = shape(kind, n, seed);
        prop_assert_eq!(&a, &shape(kind, n, seed));
        prop_assert_eq!(a.len(), n);
        let labels = a.labels.as_ref().unwrap();
        prop_assert!(labels.iter().all(|&l| l < kind.n_regions()));
        prop_assert!(a.coords.data().iter().all(|c| c.abs() <= 1.0 + 1e-12));
        if kind == ShapeKind::Sphere {
            for i in 0..n {
                let p = a.point(i);
                prop_assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-12);
                prop_assert_eq!(labels[i], usize::from(p[2] >= 0.0));
            }
        }
    }

    #[test]
    fn noise_replaces_exactly_the_requested_count(kind in kind(), n in 8usize..120, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let a = shape(kind, n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = inject_noise(&a, &CorruptionSpec::noise(ratio), FeatureFill::Coords, &mut rng).unwrap();
        let changed = (0..n).filter(|&i| a.point(i) != b.point(i)).count();
        prop_assert_eq!(changed, (ratio * n as f64).round() as usize);
        prop_assert_eq!(&a.labels, &b.labels);
    }

    #[test]
    fn sparsify_keeps_a_distinct_subset(n in 8usize..120, seed in any::<u64>()) {
        let a = shape(ShapeKind::Torus, n, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..=n);
        let b = sparsify(&a, m, &mut rng).unwrap();
        prop_assert_eq!(b.len(), m);
        let mut hits: Vec<usize> = (0..m)
            .map(|i| (0..n).find(|&j| a.point(j) == b.point(i)).expect("subset"))
            .collect();
        hits.sort_unstable();
        hits.dedup();
        prop_assert_eq!(hits.len(), m);
    }

    #[test]
    fn augmentation_is_affine_then_drop(seed in any::<u64>()) {
        let a = shape(ShapeKind::Cube, 64, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AugmentParams::draw(&mut rng);
        let b = augment_with(&a, &AugmentParams { drop_ratio: 0.0, ..p }, &mut rng);
        for i in 0..64 {
            for ax in 0..3 {
                prop_assert!((b.coords.get(&[i, ax]) - (a.coords.get(&[i, ax]) * p.scale[ax] + p.translation[ax])).abs() < 1e-15);
            }
        }
        let c = augment_with(&a, &p, &mut rng);
        let first = c.point(0);
        let copies = (1..64).filter(|&i| c.point(i) == first).count();
        prop_assert!(copies >= (p.drop_ratio * 64.0).round() as usize - usize::from(p.drop_ratio * 64.0 >= 0.5));
    }

    #[test]
    fn text_format_round_trips(kind in kind(), n in 8usize..40, with_feats in any::<bool>(), seed in any::<u64>()) {
        let mut a = shape(kind, n, seed);
        if with_feats {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            a.feats = Some(Tensor::new(&[n, 2], (0..2 * n).map(|_| rng.random::<f64>()).collect()).unwrap());
        }
        prop_assert_eq!(parse_cloud(&format_cloud(&a)).unwrap(), a);
    }
}

#[test]
fn zero_noise_and_full_count_are_identity() {
    let a = shape(ShapeKind::Cylinder, 32, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(inject_noise(&a, &CorruptionSpec::noise(0.0), FeatureFill::Zero, &mut rng).unwrap(), a);
    assert!(inject_noise(&a, &CorruptionSpec::noise(1.5), FeatureFill::Zero, &mut rng).is_err());
    assert!(sparsify(&a, 0, &mut rng).is_err());
    assert!(sparsify(&a, 33, &mut rng).is_err());
}

#[test]
fn malformed_cloud_files_are_rejected() {
    for bad in ["", "2 0 0\n0 0 0\n", "1 0 0\n0 0\n", "1 0 2\n0 0 0\n", "1 0 1\n0 0 0 x\n", "0 0 0\n"] {
        assert!(parse_cloud(bad).is_err(), "{bad:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    let a = shape(ShapeKind::PlanePair, 16, 5);
    write_cloud(&a, &path).unwrap();
    assert_eq!(read_cloud(&path).unwrap(), a);
    assert!(read_cloud(&dir.path().join("missing.txt")).is_err());
}

#[test]
fn toy_sets_are_balanced_and_disjoint() {
    let cfg = ToyConfig { n_train: 20, n_test: 10, n_points: 32, ..ToyConfig::default() };
    let (train, test) = classification_set(&cfg).unwrap();
    for c in 0..5 {
        assert_eq!(train.iter().filter(|s| s.label == c).count(), 4);
        assert_eq!(test.iter().filter(|s| s.label == c).count(), 2);
    }
    assert!(train.iter().all(|s| test.iter().all(|t| t.cloud != s.cloud)));
}

#[test]
fn checkpoint_round_trips_and_restores() {
    let cfg = ExperimentConfig::parse(TINY, &["epochs=1".into(), "n_train=8".into(), "n_test=4".into()]).unwrap();
    let trained = pcnet_core::experiment::run(&cfg, |_| {}).unwrap();
    let mut params = trained.state.params.clone();
    // Gradient buffers are transient and not persisted.
    params.zero_grads();
    let ck = Checkpoint { config_text: cfg.to_text(), step: trained.state.step, params };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let (cfg2, model, params) = restore(&loaded).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(model, trained.model);
    assert_eq!(params, ck.params);

    let mut bytes = ck.to_bytes();
    let last = bytes.len() - 1;
    bytes.truncate(last);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let mut flipped = ck.to_bytes();
    flipped[9] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
}

#[test]
fn segmenter_is_point_order_equivariant() {
    let cfg = ExperimentConfig::parse(TINY_SEG, &[]).unwrap();
    let (model, store) = cfg.build_model().unwrap();
    let a = shape(ShapeKind::Sphere, 48, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Keep row 0 in place: the first sampled point is the first row.
    let mut perm: Vec<usize> = (1..48).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    perm.insert(0, 0);
    let b = a.select(&perm).unwrap();
    let run = |pc: &PointCloud| {
        let mut t = Tape::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let out = model.forward(&mut t, &[pc, pc], false).unwrap();
        assert!(out.interp_weight_error <= 1e-12);
        t.value(out.logits).clone()
    };
    let (la, lb) = (run(&a), run(&b));
    assert_eq!(la.shape(), &[96, 2]);
    for (i, &p) in perm.iter().enumerate() {
        for (x, y) in lb.row(i).iter().zip(la.row(p)) {
            assert!((x - y).abs() < 1e-9, "point {i}: {x} vs {y}");
        }
    }
}

#[test]
fn classifier_output_depends_only_on_the_cloud() {
    let cfg = ExperimentConfig::parse(TINY, &[]).unwrap();
    let (model, store) = cfg.build_model().unwrap();
    let clouds: Vec<PointCloud> = (0..3).map(|s| shape(ShapeKind::ALL[s], 48, s as u64)).collect();
    let mut t = Tape::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
    let all = model.forward(&mut t, &clouds.iter().collect::<Vec<_>>(), false).unwrap();
    let all = t.value(all.logits).clone();
    for (i, c) in clouds.iter().enumerate() {
        let mut t = Tape::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let one = model.forward(&mut t, &[c], false).unwrap();
        for (x, y) in t.value(one.logits).row(0).iter().zip(all.row(i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
