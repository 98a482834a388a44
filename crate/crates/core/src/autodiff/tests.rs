use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

type Check = Box<dyn Fn(&mut Graph, Var) -> Result<Var, AutodiffError>>;

/// Runs a scalar check at 20 seeded random points.
fn check_op(name: &str, shape: Vec<usize>, lo: f64, hi: f64, f: Check) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    for trial in 0..20 {
        let x = random(&mut rng, shape.clone(), lo, hi);
        let r = grad_check_default(&f, &x).unwrap();
        assert!(
            r.max_rel_error < 1e-6,
            "{name} trial {trial}: rel err {}",
            r.max_rel_error
        );
    }
}

#[test]
fn smooth_l1_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.5));
    let t = g.scalar(0.0);
    let l = g.smooth_l1(x, t, 1.0).unwrap();
    assert_eq!(g.value(l).item(), 0.125);
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().item(), 0.5);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let t = g.scalar(0.0);
    let l = g.smooth_l1(x, t, 1.0).unwrap();
    assert_eq!(g.value(l).item(), 1.5);
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().item(), 1.0);
}

#[test]
fn cosine_orthogonal() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
    let b = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]));
    let c = g.cosine_similarity(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[0.0]);
    let one_minus = g.neg(c).unwrap();
    let loss = g.add_scalar(one_minus, 1.0).unwrap();
    assert_eq!(g.value(loss).data(), &[1.0]);
}

#[test]
fn square_gradcheck() {
    let r = grad_check_default(|g, x| g.mul(x, x), &Tensor::scalar(3.0)).unwrap();
    assert_eq!(r.analytic.item(), 6.0);
    assert!((r.numeric.item() - 6.0).abs() < 1e-6);
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![3, 2]));
    match g.add(a, b) {
        Err(AutodiffError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let e = g.matmul(a, a).unwrap_err();
    assert!(e.to_string().contains("matmul"));
}

#[test]
fn non_finite_is_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![0.0, 1.0]));
    assert_eq!(
        g.log(a).unwrap_err(),
        AutodiffError::NonFinite { op: "log" }
    );
    let r = grad_check_default(
        |g, x| {
            let l = g.log(x)?;
            g.sum(l, None)
        },
        &Tensor::vector(vec![-1.0]),
    );
    assert!(r.is_err());
}

#[test]
fn gradcheck_elementwise_ops() {
    fn unary(op: fn(&mut Graph, Var) -> Result<Var, AutodiffError>) -> Check {
        Box::new(move |g, x| {
            let y = op(g, x)?;
            let w = g.constant(Tensor::new(
                g.value(y).shape().to_vec(),
                (0..g.value(y).len())
                    .map(|i| 0.3 + 0.1 * i as f64)
                    .collect(),
            ));
            let p = g.mul(y, w)?;
            g.sum(p, None)
        })
    }
    check_op("exp", vec![3, 4], -2.0, 2.0, unary(|g, x| g.exp(x)));
    check_op("log", vec![3, 4], 0.2, 3.0, unary(|g, x| g.log(x)));
    check_op("tanh", vec![3, 4], -2.0, 2.0, unary(|g, x| g.tanh(x)));
    check_op("sigmoid", vec![3, 4], -4.0, 4.0, unary(|g, x| g.sigmoid(x)));
    check_op("pow", vec![3, 4], 0.2, 2.0, unary(|g, x| g.pow(x, 2.5)));
    check_op("scale", vec![5], -1.0, 1.0, unary(|g, x| g.scale(x, -1.7)));
    check_op(
        "add_scalar",
        vec![5],
        -1.0,
        1.0,
        unary(|g, x| g.add_scalar(x, 0.4)),
    );
    check_op(
        "reshape",
        vec![2, 6],
        -1.0,
        1.0,
        unary(|g, x| g.reshape(x, vec![3, 4])),
    );
    check_op(
        "clamp",
        vec![2, 6],
        -1.0,
        1.0,
        unary(|g, x| g.clamp(x, -0.5, 0.5)),
    );
    check_op(
        "map",
        vec![4],
        -1.0,
        1.0,
        unary(|g, x| g.map(x, f64::sin, f64::cos)),
    );
}

#[test]
fn gradcheck_binary_ops() {
    // x packs both operands: first half lhs, second half rhs.
    fn binary(op: fn(&mut Graph, Var, Var) -> Result<Var, AutodiffError>) -> Check {
        Box::new(move |g, x| {
            let d = g.value(x).data().to_vec();
            let n = d.len() / 2;
            let sel_a = Rc::new((0..n).map(|i| vec![(i, 1.0)]).collect::<SparseRows>());
            let sel_b = Rc::new((0..n).map(|i| vec![(n + i, 1.0)]).collect::<SparseRows>());
            let flat = g.reshape(x, vec![1, 2 * n])?;
            let a = g.sparse_pool(flat, sel_a)?;
            let b = g.sparse_pool(flat, sel_b)?;
            let a = g.reshape(a, vec![2, n / 2])?;
            let b = g.reshape(b, vec![2, n / 2])?;
            let y = op(g, a, b)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2, None)
        })
    }
    check_op("add", vec![8], -1.0, 1.0, binary(|g, a, b| g.add(a, b)));
    check_op("sub", vec![8], -1.0, 1.0, binary(|g, a, b| g.sub(a, b)));
    check_op("mul", vec![8], -1.0, 1.0, binary(|g, a, b| g.mul(a, b)));
    check_op("atan2", vec![8], 0.3, 1.0, binary(|g, a, b| g.atan2(a, b)));
    check_op(
        "cosine",
        vec![8],
        -1.0,
        1.0,
        binary(|g, a, b| g.cosine_similarity(a, b)),
    );
}

#[test]
fn gradcheck_smooth_l1_resamples_kink() {
    let f = |g: &mut Graph, x: Var| {
        let t = g.constant(Tensor::vector(vec![0.1, -0.3, 0.0, 0.5]));
        let l = g.smooth_l1(x, t, 1.0)?;
        g.sum(l, None)
    };
    let targets = [0.1, -0.3, 0.0, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut done = 0;
    while done < 20 {
        let x = random(&mut rng, vec![4], -3.0, 3.0);
        if x.data()
            .iter()
            .zip(targets)
            .any(|(v, t)| ((v - t).abs() - 1.0).abs() < 1e-3)
        {
            continue;
        }
        assert!(grad_check_default(f, &x).unwrap().max_rel_error < 1e-6);
        done += 1;
    }
}

#[test]
fn gradcheck_matrix_ops() {
    check_op(
        "matmul",
        vec![3, 4],
        -1.0,
        1.0,
        Box::new(|g, x| {
            let w = g.constant(Tensor::matrix(
                4,
                2,
                vec![0.5, -1.0, 0.2, 0.3, -0.7, 0.9, 1.1, 0.05],
            ));
            let y = g.matmul(x, w)?;
            let y = g.tanh(y)?;
            g.sum(y, None)
        }),
    );
    check_op(
        "matmul_rhs",
        vec![4, 2],
        -1.0,
        1.0,
        Box::new(|g, x| {
            let a = g.constant(Tensor::matrix(
                3,
                4,
                (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
            ));
            let y = g.matmul(a, x)?;
            let y = g.mul(y, y)?;
            g.sum(y, None)
        }),
    );
    check_op(
        "add_row",
        vec![3],
        -1.0,
        1.0,
        Box::new(|g, x| {
            let m = g.constant(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]));
            let y = g.add_row(m, x)?;
            let y = g.mul(y, y)?;
            g.sum(y, None)
        }),
    );
    for axis in [0, 1] {
        check_op(
            "sum_axis",
            vec![3, 4],
            -1.0,
            1.0,
            Box::new(move |g, x| {
                let s = g.sum(x, Some(axis))?;
                let s = g.mul(s, s)?;
                g.sum(s, None)
            }),
        );
        check_op(
            "softmax",
            vec![4, 3],
            -2.0,
            2.0,
            Box::new(move |g, x| {
                let s = g.softmax(x, axis)?;
                let w = g.constant(Tensor::matrix(
                    4,
                    3,
                    (0..12).map(|i| (i as f64).cos()).collect(),
                ));
                let s = g.mul(s, w)?;
                g.sum(s, None)
            }),
        );
    }
}

#[test]
fn gradcheck_softmax_log_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, vec![4, 3], -1.0, 1.0);
    let r = grad_check_default(
        |g, x| {
            let s = g.softmax(x, 1)?;
            let l = g.log(s)?;
            g.sum(l, None)
        },
        &x,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6);
}

#[test]
fn gradcheck_conv_and_pool() {
    let rows: Rc<SparseRows> =
        Rc::new(vec![vec![(0, 0.5), (7, 0.25)], vec![(12, 1.0), (24, -0.3)]]);
    let image = {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        random(&mut rng, vec![1, 5, 5], 0.0, 1.0)
    };
    let img = image.clone();
    check_op(
        "conv_kernel",
        vec![2, 1, 3, 3],
        -1.0,
        1.0,
        Box::new(move |g, k| {
            let x = g.constant(img.clone());
            let y = g.conv3x3(x, k)?;
            let y = g.mul(y, y)?;
            let p = g.sparse_pool(y, rows.clone())?;
            g.sum(p, None)
        }),
    );
    check_op(
        "conv_input",
        vec![1, 5, 5],
        -1.0,
        1.0,
        Box::new(|g, x| {
            let k = g.constant(Tensor::new(
                vec![1, 1, 3, 3],
                vec![1.0, 0.0, -1.0, 2.0, 0.5, -2.0, 1.0, 0.3, -1.0],
            ));
            let y = g.conv3x3(x, k)?;
            let y = g.mul(y, y)?;
            g.sum(y, None)
        }),
    );
}

#[test]
fn conv_matches_direct_formula() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()));
    let mut k = vec![0.0; 9];
    k[5] = 1.0; // picks the right neighbour
    let kv = g.constant(Tensor::new(vec![1, 1, 3, 3], k));
    let y = g.conv3x3(x, kv).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[2.0, 3.0, 0.0, 5.0, 6.0, 0.0, 8.0, 9.0, 0.0]
    );
}

#[test]
fn softmax_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, vec![6, 4], -30.0, 30.0);
    let mut g = Graph::new();
    let v = g.constant(x);
    let rows = g.softmax(v, 1).unwrap();
    let cols = g.softmax(v, 0).unwrap();
    for i in 0..6 {
        assert!((g.value(rows).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let t = g.value(cols);
    for j in 0..4 {
        assert!(((0..6).map(|i| t.at(i, j)).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_touches_only_ancestors() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(2.0));
    let b = g.param(Tensor::scalar(5.0));
    let y = g.mul(a, a).unwrap();
    let _unused = g.mul(b, b).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(a).unwrap().item(), 4.0);
    assert!(grads.get(b).is_none());
    let c = g.constant(Tensor::scalar(1.0));
    let z = g.mul(c, a).unwrap();
    assert!(g.backward(z).unwrap().get(c).is_none());
}

proptest! {
    #[test]
    fn backward_is_linear(xs in prop::collection::vec(-2.0f64..2.0, 6), wa in -2.0f64..2.0, wb in -2.0f64..2.0) {
        let x = Tensor::matrix(2, 3, xs);
        let grad_of = |wa: f64, wb: f64| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let s = g.softmax(v, 1).unwrap();
            let la = g.sum(s, Some(0)).unwrap();
            let la = g.mul(la, la).unwrap();
            let la = g.sum(la, None).unwrap();
            let t = g.tanh(v).unwrap();
            let lb = g.sum(t, None).unwrap();
            let la = g.scale(la, wa).unwrap();
            let lb = g.scale(lb, wb).unwrap();
            let l = g.add(la, lb).unwrap();
            g.backward(l).unwrap().get(v).unwrap().clone()
        };
        let both = grad_of(wa, wb);
        let mut sum = grad_of(wa, 0.0);
        sum.add_assign(&grad_of(0.0, wb));
        prop_assert!(both.max_abs_diff(&sum) < 1e-12);
    }
}
