use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check_default;
use crate::image::Image;

fn random_feats(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::matrix(
        n,
        FEATURE_DIM,
        (0..n * FEATURE_DIM)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
}

#[test]
fn singleton_bag_equals_class_row() {
    let s = ScorePair::from_logits(
        &Tensor::matrix(1, 3, vec![0.3, -2.0, 5.0]),
        &Tensor::matrix(1, 3, vec![1.0, 2.0, 0.5]),
    );
    assert_eq!(s.ins.data(), &[1.0, 1.0, 1.0]);
    let bag = s.bag_score();
    for (b, c) in bag.iter().zip(s.cls.row(0)) {
        assert!((b - c).abs() < 1e-15);
    }
}

#[test]
fn uniform_logits() {
    let z = Tensor::zeros(vec![2, 3]);
    let s = ScorePair::from_logits(&z, &z);
    assert!(s.ins.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    assert!(s.cls.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    assert!(s.bag_score().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn score_pair_invariants_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = MilParams::init(&MilConfig::default(), 3, &mut rng);
    for n in [1, 5, 20] {
        let (s, r) = score_bag_values(&params, &random_feats(&mut rng, n)).unwrap();
        for sp in [s, r] {
            for c in 0..3 {
                let col: f64 = (0..n).map(|i| sp.ins.at(i, c)).sum();
                assert!((col - 1.0).abs() < 1e-9);
            }
            for i in 0..n {
                assert!((sp.cls.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            // A singleton bag puts all instance mass on its only proposal.
            let hi = if n == 1 { 1.0 } else { 1.0 - 1e-300 };
            assert!(sp.ins.data().iter().all(|&v| v > 0.0 && v <= hi));
            assert!(sp.cls.data().iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(sp.bag_score().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn empty_bag_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = MilParams::init(&MilConfig::default(), 3, &mut rng);
    let r = score_bag_values(&params, &Tensor::matrix(0, FEATURE_DIM, vec![]));
    assert_eq!(r.unwrap_err(), MilError::EmptyBag);
}

#[test]
fn mil_loss_examples() {
    assert!(mil_value(&[vec![1.0, 0.0]], &[0]) < 1e-5);
    assert!((mil_value(&[vec![0.5]], &[0]) - 0.5f64.ln().abs()).abs() < 1e-12);
    let hand = (-(0.9f64.ln()) * 2.0 + -(0.8f64.ln()) * 2.0) / 2.0;
    let v = mil_value(&[vec![0.9, 0.1], vec![0.2, 0.8]], &[0, 1]);
    assert!((v - hand).abs() < 1e-12);

    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![0.9, 0.1]));
    let b = g.constant(Tensor::vector(vec![0.2, 0.8]));
    let l = mil_loss(&mut g, &[a, b], &[0, 1]).unwrap();
    assert!((g.value(l).item() - hand).abs() < 1e-12);
}

#[test]
fn focal_examples() {
    assert!(focal_value(&[vec![1.0 - 1e-7]], &[0], 2.0, 0.25) < 1e-12);
    let v = focal_value(&[vec![0.5]], &[0], 2.0, 0.25);
    assert!((v - 0.04332).abs() < 1e-4, "{v}");
    let bags = vec![vec![0.7, 0.2, 0.4], vec![0.1, 0.6, 0.3]];
    assert!((focal_value(&bags, &[0, 2], 0.0, 1.0) - mil_value(&bags, &[0, 2])).abs() < 1e-12);

    let mut g = Graph::new();
    let vs: Vec<Var> = bags
        .iter()
        .map(|b| g.constant(Tensor::vector(b.clone())))
        .collect();
    let l = refined_mil_loss(&mut g, &vs, &[0, 2], 2.0, 0.25).unwrap();
    assert!((g.value(l).item() - focal_value(&bags, &[0, 2], 2.0, 0.25)).abs() < 1e-12);
}

#[test]
fn bad_class_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![0.5, 0.5]));
    assert!(matches!(
        mil_loss(&mut g, &[a], &[2]),
        Err(MilError::BadClass { .. })
    ));
}

#[test]
fn losses_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let x = Tensor::matrix(2, 3, (0..6).map(|_| rng.gen_range(0.02..0.98)).collect());
        let sel = |g: &mut Graph, v: Var, r: usize| -> std::result::Result<Var, AutodiffError> {
            let rows = std::rc::Rc::new(
                (0..3)
                    .map(|c| vec![(r * 3 + c, 1.0)])
                    .collect::<crate::autodiff::SparseRows>(),
            );
            let flat = g.reshape(v, vec![1, 6])?;
            let p = g.sparse_pool(flat, rows)?;
            g.reshape(p, vec![3])
        };
        let rep = grad_check_default(
            |g, v| {
                let a = sel(g, v, 0)?;
                let b = sel(g, v, 1)?;
                mil_loss(g, &[a, b], &[0, 2]).map_err(|e| match e {
                    MilError::Autodiff(e) => e,
                    _ => unreachable!(),
                })
            },
            &x,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5);
        let rep = grad_check_default(
            |g, v| {
                let a = sel(g, v, 0)?;
                let b = sel(g, v, 1)?;
                refined_mil_loss(g, &[a, b], &[1, 2], 2.0, 0.25).map_err(|e| match e {
                    MilError::Autodiff(e) => e,
                    _ => unreachable!(),
                })
            },
            &x,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5);
    }
}

#[test]
fn head_gradients_reach_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = MilParams::init(&MilConfig::default(), 3, &mut rng);
    let feats = random_feats(&mut rng, 6);
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let (s, emb) = score_bag(&mut g, &vars, &feats).unwrap();
    let r = score_stream(&mut g, &vars.refined, emb).unwrap();
    let a = mil_loss(&mut g, &[s.bag], &[1]).unwrap();
    let b = refined_mil_loss(&mut g, &[r.bag], &[1], 2.0, 0.25).unwrap();
    let l = g.add(a, b).unwrap();
    let grads = g.backward(l).unwrap();
    for v in vars.all() {
        assert!(grads.get(v).is_some());
    }
}

fn bx(w: f64, s: f64) -> OrientedBox {
    OrientedBox::new(50.0, 50.0, w, 20.0, s)
}

#[test]
fn select_examples() {
    let one = [bx(33.0, 0.2)];
    let s = select_pseudo_obb([50.0, 50.0], &one, &[0.7], 3, 0.0).unwrap();
    assert_eq!(s.obb, one[0]);
    assert_eq!(s.confidence, 0.7);

    let three = [bx(30.0, 0.2), bx(40.0, 0.2), bx(50.0, 0.2)];
    let s = select_pseudo_obb([50.0, 50.0], &three, &[0.2, 0.2, 0.2], 3, 0.0).unwrap();
    assert!((s.obb.w - 40.0).abs() < 1e-12);
    let s = select_pseudo_obb([50.0, 50.0], &three, &[0.5, 0.3, 0.2], 3, 0.0).unwrap();
    assert!((s.obb.w - 37.0).abs() < 1e-12);
    assert_eq!(s.obb.theta, 0.2);
    assert_eq!(s.best, 0);

    assert!(select_pseudo_obb([0.0, 0.0], &[], &[], 3, 0.0).is_none());
}

proptest! {
    #[test]
    fn permuting_proposals_keeps_bag_score(seed in 0u64..200, shift in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MilParams::init(&MilConfig::default(), 3, &mut rng);
        let n = 7;
        let f = random_feats(&mut rng, n);
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pf = Tensor::matrix(n, FEATURE_DIM, perm.iter().flat_map(|&i| f.row(i).to_vec()).collect());
        let (a, _) = score_bag_values(&params, &f).unwrap();
        let (b, _) = score_bag_values(&params, &pf).unwrap();
        for (x, y) in a.bag_score().iter().zip(b.bag_score()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let la = mil_value(&[a.bag_score()], &[1]);
        let lb = mil_value(&[b.bag_score()], &[1]);
        prop_assert!((la - lb).abs() < 1e-12);
        prop_assert!(la >= 0.0);
    }

    #[test]
    fn zero_weight_duplicate_is_ignored(
        ws in proptest::collection::vec(10.0f64..80.0, 3..8),
        ss in proptest::collection::vec(0.01f64..1.0, 8),
        dup in 0usize..8,
    ) {
        let n = ws.len();
        let boxes: Vec<OrientedBox> = ws.iter().map(|&w| bx(w, 0.3)).collect();
        let scores = ss[..n].to_vec();
        let base = select_pseudo_obb([50.0, 50.0], &boxes, &scores, 3, 0.0).unwrap();
        let mut b2 = boxes.clone();
        let mut s2 = scores.clone();
        b2.push(boxes[dup % n]);
        s2.push(0.0);
        let more = select_pseudo_obb([50.0, 50.0], &b2, &s2, 3, 0.0).unwrap();
        prop_assert!((base.obb.w - more.obb.w).abs() < 1e-9);
        prop_assert!((base.obb.h - more.obb.h).abs() < 1e-9);
        prop_assert_eq!(base.obb.theta, more.obb.theta);
    }
}

#[test]
fn fitted_box_has_the_strongest_contrast() {
    let mut img = Image::filled(128, 128, 0.1);
    let obj = OrientedBox::new(64.0, 64.0, 48.0, 16.0, 0.0);
    for y in 0..128 {
        for x in 0..128 {
            if obj.contains([x as f64 + 0.5, y as f64 + 0.5]) {
                img.set(x, y, 0.6);
            }
        }
    }
    let fit = proposal_features(&img, &obj);
    let part = proposal_features(&img, &OrientedBox::new(64.0, 64.0, 16.0, 8.0, 0.0));
    let big = proposal_features(&img, &OrientedBox::new(64.0, 64.0, 96.0, 64.0, 0.0));
    let long = proposal_features(&img, &OrientedBox::new(64.0, 64.0, 48.0, 40.0, 0.0));
    for other in [part, big, long] {
        assert!(fit[0] > other[0] && fit[1] > other[1], "{fit:?} {other:?}");
    }
    // Every side on an edge: the full step of 0.5, times 4.
    assert!((fit[1] - 2.0).abs() < 0.05, "{fit:?}");
    // One axis matching leaves two sides without an edge.
    assert!(long[1].abs() < 0.1, "{long:?}");
}
