use proptest::prelude::*;
use rrlm::gradcheck::{self, check, weighted_sum};
use rrlm::rng;
use rrlm::tensor::{PoolMode, Reduction, Tape, Tensor};
use rrlm::Error;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn matmul_identity_cases() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let eye = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = t.matmul(x, eye).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let y = t.matmul(eye, x).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}"),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng::stream(11, &[]);
    let a = rng::normal_tensor(&mut r, &[3, 4], 1.0);
    let b = rng::normal_tensor(&mut r, &[4, 2], 1.0);
    let w = rng::normal_tensor(&mut r, &[3, 2], 1.0);
    let err = check(&[a, b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, &w)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0; 4]));
    let y = t.softmax(x, 0).unwrap();
    assert!(t.value(y).data().iter().all(|&p| close(p, 0.25, 1e-15)));

    let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = t.softmax(x, 0).unwrap();
    let p = t.value(y).data();
    assert!(p.iter().all(|v| v.is_finite()));
    assert!(close(p[0], 1.0, 1e-12) && close(p[1], 0.0, 1e-12));

    assert!(matches!(t.softmax(x, 1), Err(Error::Dimension(_))));
}

#[test]
fn softmax_gradient_length_seven() {
    let mut r = rng::stream(12, &[]);
    let x = rng::normal_tensor(&mut r, &[7], 1.0);
    let w = rng::normal_tensor(&mut r, &[7], 1.0);
    let err = check(&[x], |t, v| {
        let y = t.softmax(v[0], 0)?;
        weighted_sum(t, y, &w)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::zeros(&[3, 4]));
    let l = t.cross_entropy(logits, &[0, 1, 3], None, Reduction::Mean).unwrap();
    assert!(close(t.value(l).item().unwrap(), 4f64.ln(), 1e-12));

    let mut prev = f64::INFINITY;
    for mag in [1.0, 10.0, 100.0] {
        let logits = t.constant(Tensor::matrix(1, 4, vec![mag, 0.0, 0.0, 0.0]).unwrap());
        let l = t.cross_entropy(logits, &[0], None, Reduction::Mean).unwrap();
        let v = t.value(l).item().unwrap();
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-40);

    let logits = t.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(t.cross_entropy(logits, &[0, 4], None, Reduction::Mean), Err(Error::Index(_))));
}

#[test]
fn cross_entropy_ignored_positions_contribute_nothing() {
    let mut r = rng::stream(13, &[]);
    let full = rng::normal_tensor(&mut r, &[3, 5], 1.0);
    let mut t = Tape::new();
    let x = t.leaf(full.clone());
    let l = t.cross_entropy(x, &[2, 9, 4], Some(9), Reduction::Mean).unwrap();
    t.backward(l).unwrap();
    let g = t.grad(x).unwrap();
    assert!(g[5..10].iter().all(|&v| v == 0.0));

    let mut t2 = Tape::new();
    let rows = [full.row(0), full.row(2)].concat();
    let x2 = t2.constant(Tensor::matrix(2, 5, rows).unwrap());
    let l2 = t2.cross_entropy(x2, &[2, 4], None, Reduction::Mean).unwrap();
    assert_eq!(t.value(l).item().unwrap(), t2.value(l2).item().unwrap());
}

#[test]
fn cross_entropy_gradient_random_5x8() {
    let mut r = rng::stream(14, &[]);
    let logits = rng::normal_tensor(&mut r, &[5, 8], 1.0);
    let err = check(&[logits], |t, v| t.cross_entropy(v[0], &[0, 3, 7, 1, 1], None, Reduction::Mean)).unwrap();
    assert!(err < 1e-6, "{err}");
}

fn brute_pool(x: &Tensor, mask: &[bool], mode: PoolMode) -> Vec<f64> {
    let d = x.shape()[1];
    (0..d)
        .map(|j| {
            let vals: Vec<f64> = (0..x.shape()[0]).filter(|&r| mask[r]).map(|r| x.row(r)[j]).collect();
            match mode {
                PoolMode::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                PoolMode::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
            }
        })
        .collect()
}

#[test]
fn pool_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(3, 2, vec![5.0, -1.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
    for mode in [PoolMode::Max, PoolMode::Mean] {
        let p = t.pool(x, &[true, false, false], 1, mode).unwrap();
        assert_eq!(t.value(p).data(), &[5.0, -1.0]);
    }
    let max = t.pool(x, &[false, true, true], 1, PoolMode::Max).unwrap();
    assert_eq!(t.value(max).data(), &[1.0, 1.0]);
    let mean = t.pool(x, &[false, true, true], 1, PoolMode::Mean).unwrap();
    assert_eq!(t.value(mean).data(), &[0.5, 0.5]);
    assert!(matches!(t.pool(x, &[false; 3], 1, PoolMode::Max), Err(Error::EmptyPool)));
}

#[test]
fn pool_matches_brute_force_reduction() {
    let mut r = rng::stream(15, &[]);
    let x = rng::normal_tensor(&mut r, &[6, 3], 1.0);
    let mask = [true, false, true, true, false, true];
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    for mode in [PoolMode::Max, PoolMode::Mean] {
        let p = t.pool(v, &mask, 1, mode).unwrap();
        let want = brute_pool(&x, &mask, mode);
        if mode == PoolMode::Max {
            assert_eq!(t.value(p).data(), want.as_slice());
        } else {
            for (a, b) in t.value(p).data().iter().zip(&want) {
                assert!(close(*a, *b, 1e-15));
            }
        }
    }
}

#[test]
fn max_pool_ties_route_to_first_row() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap());
    let p = t.pool(x, &[true, true, true], 1, PoolMode::Max).unwrap();
    let s = t.sum(p);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn cosine_examples() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::vector(vec![0.3, -2.0, 5.0]));
    let c = t.cosine(v, v, 1e-8).unwrap();
    assert!(close(t.value(c).item().unwrap(), 1.0, 1e-15));
    let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
    let b = t.constant(Tensor::vector(vec![0.0, 1.0]));
    let c = t.cosine(a, b, 1e-8).unwrap();
    assert_eq!(t.value(c).item().unwrap(), 0.0);
    let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let c = t.cosine(a, z, 1e-8).unwrap();
    assert_eq!(t.value(c).item().unwrap(), 0.0);
    let short = t.constant(Tensor::vector(vec![1.0]));
    assert!(matches!(t.cosine(a, short, 1e-8), Err(Error::Dimension(_))));
}

#[test]
fn cosine_gradient_random_pair() {
    let mut r = rng::stream(16, &[]);
    let a = rng::normal_tensor(&mut r, &[6], 1.0);
    let b = rng::normal_tensor(&mut r, &[6], 1.0);
    let err = check(&[a, b], |t, v| t.cosine(v[0], v[1], 1e-8)).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_sum_gives_unit_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_on_constant_leaves_gradients_untouched() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let c = t.constant(Tensor::scalar(3.0));
    t.backward(c).unwrap();
    assert!(t.grad(x).is_none());
    assert_eq!(t.grad_tensor(x).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Rank(_))));
}

#[test]
fn constants_never_record_backward_nodes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = t.mul(a, b).unwrap();
    assert!(!t.requires_grad(y));
}

#[test]
fn composite_chain_gradient() {
    let mut r = rng::stream(17, &[]);
    let x = rng::normal_tensor(&mut r, &[4, 3], 1.0);
    let w = rng::normal_tensor(&mut r, &[3, 6], 1.0);
    let err = check(&[x, w], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let p = t.softmax(h, 1)?;
        t.cross_entropy(p, &[0, 5, 2, 3], None, Reduction::Mean)
    })
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn twice_backward_doubles_exactly() {
    let mut r = rng::stream(18, &[]);
    let x0 = rng::normal_tensor(&mut r, &[3, 4], 1.0);
    let w0 = rng::normal_tensor(&mut r, &[4, 5], 1.0);
    let mut t = Tape::new();
    let x = t.leaf(x0);
    let w = t.leaf(w0);
    let h = t.matmul(x, w).unwrap();
    let h = t.gelu(h);
    let l = t.cross_entropy(h, &[0, 1, 4], None, Reduction::Mean).unwrap();
    t.backward(l).unwrap();
    let once = t.grad_tensor(w);
    t.backward(l).unwrap();
    let twice = t.grad_tensor(w);
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn every_primitive_passes_over_twenty_seeds() {
    for r in gradcheck::primitive_suite(20).unwrap() {
        assert!(r.passed(), "{} max rel error {:e}", r.name, r.max_rel_error);
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(xs));
        let y = t.softmax(x, 0).unwrap();
        let p = t.value(y).data();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_pool_is_exact(seed in 0u64..1000, rows in 1usize..8) {
        let mut r = rng::stream(seed, &[]);
        let x = rng::normal_tensor(&mut r, &[rows, 4], 1.0);
        let mut mask: Vec<bool> = (0..rows).map(|i| (seed >> i) & 1 == 1).collect();
        mask[0] = true;
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let p = t.pool(v, &mask, 1, PoolMode::Max).unwrap();
        let want = brute_pool(&x, &mask, PoolMode::Max);
        prop_assert_eq!(t.value(p).data(), want.as_slice());
    }
}
