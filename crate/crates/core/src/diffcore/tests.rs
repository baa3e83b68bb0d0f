use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn eval1(a: &Tensor, f: impl Fn(&mut Tape, Var) -> crate::Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.leaf(a);
    let out = f(&mut tape, v).unwrap();
    tape.value(out).unwrap().clone()
}

#[test]
fn matmul_identity_and_oracle() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    let i = tape.constant(Tensor::identity(2));
    let out = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(out).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

    let i = tape.constant(Tensor::identity(2));
    let b = tape.constant(Tensor::from_rows(&[[5.0], [7.0]]));
    let out = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(out).unwrap().data(), &[5.0, 7.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, y) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2));
    let xv = tape.leaf(&x);
    let yv = tape.leaf(&y);
    let out = tape.matmul(xv, yv).unwrap();
    assert!(tape.value(out).unwrap().max_abs_diff(&naive_matmul(&x, &y)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(2, 3));
    let b = tape.constant(Tensor::zeros(2, 3));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(
        err,
        Error::Shape {
            lhs: (2, 3),
            rhs: (2, 3),
            ..
        }
    ));
    assert!(err.to_string().contains("(2, 3)"));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]));
    let z = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]));
    let s = tape.add(a, z).unwrap();
    assert_eq!(tape.value(s).unwrap().data(), &[1.0, 2.0]);

    let a = tape.constant(Tensor::from_rows(&[[2.0, 3.0]]));
    let b = tape.constant(Tensor::from_rows(&[[4.0, 5.0]]));
    let h = tape.mul(a, b).unwrap();
    assert_eq!(tape.value(h).unwrap().data(), &[8.0, 15.0]);

    let x = tape.constant(Tensor::from_rows(&[[1.5, -2.0], [3.0, 0.25]]));
    let d = tape.sub(x, x).unwrap();
    assert!(tape.value(d).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_row_broadcast_and_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    let b = tape.constant(Tensor::row(vec![10.0, 20.0]));
    let s = tape.add(a, b).unwrap();
    assert_eq!(tape.value(s).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);

    let bad = tape.constant(Tensor::zeros(3, 3));
    assert!(matches!(tape.add(a, bad), Err(Error::Shape { .. })));
}

#[test]
fn activation_examples() {
    let zero = Tensor::scalar(0.0);
    assert_eq!(eval1(&zero, |t, v| t.sigmoid(v)).data(), &[0.5]);
    assert_eq!(eval1(&zero, |t, v| t.tanh(v)).data(), &[0.0]);
    let neg = Tensor::scalar(-1.0);
    let out = eval1(&neg, |t, v| {
        t.activation(Activation::LeakyRelu { slope: 0.01 }, v)
    });
    assert!((out.data()[0] - -0.01).abs() < 1e-15);
    assert_eq!(eval1(&neg, |t, v| t.activation(Activation::Relu, v)).data(), &[0.0]);
    // sigmoid stays finite for large-magnitude inputs
    let big = Tensor::row(vec![-800.0, 800.0]);
    let s = eval1(&big, |t, v| t.sigmoid(v));
    assert!(s.all_finite());
    assert_eq!(s.data(), &[0.0, 1.0]);
}

#[test]
fn softmax_examples() {
    let out = eval1(&Tensor::row(vec![0.0, 0.0]), |t, v| t.softmax_rows(v));
    assert_eq!(out.data(), &[0.5, 0.5]);
    for c in [-30.0, 0.0, 7.5, 1e3] {
        let out = eval1(&Tensor::row(vec![c, c, c]), |t, v| t.softmax_rows(v));
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
    let out = eval1(&Tensor::row(vec![1.0, 2.0, 3.0]), |t, v| t.softmax_rows(v));
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    for (k, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((out.data()[k] - x.exp() / z).abs() < 1e-15);
    }
}

#[test]
fn reduce_examples() {
    let r = |kind, t: Tensor| eval1(&t, |tp, v| tp.reduce(kind, v)).item().unwrap();
    assert_eq!(r(Reduction::Mean, Tensor::row(vec![1.0, 3.0])), 2.0);
    assert_eq!(r(Reduction::MeanAbs, Tensor::row(vec![1.0, -1.0])), 1.0);
    assert_eq!(r(Reduction::MeanSq, Tensor::row(vec![2.0, -2.0])), 4.0);
    assert_eq!(r(Reduction::Sum, Tensor::row(vec![2.0, -2.0, 5.0])), 5.0);

    let mut tape = Tape::new();
    let e = tape.constant(Tensor::zeros(0, 3));
    assert!(matches!(tape.reduce(Reduction::Sum, e), Err(Error::Domain(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::filled(2, 3, 0.7).with_grad());
    let l = tape.reduce(Reduction::Sum, x).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(0).unwrap().data(), &[1.0; 6]);
    assert!(tape.is_empty());

    let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
    let l = tape.reduce(Reduction::MeanSq, x).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(0).unwrap().data(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar_and_stale_handles() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(2, 2).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    let s = tape.reduce(Reduction::Sum, x).unwrap();
    tape.backward(s).unwrap();
    // the tape was cleared; old handles are rejected
    assert!(matches!(tape.value(x), Err(Error::Contract(_))));
    let mut other = Tape::new();
    let y = other.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.value(y), Err(Error::Contract(_))));
}

#[test]
fn mean_abs_subgradient_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::row(vec![0.0, 2.0, -1.0, 0.0]).with_grad());
    let l = tape.reduce(Reduction::MeanAbs, x).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(0).unwrap().data(), &[0.0, 0.25, -0.25, 0.0]);
}

#[test]
fn leaf_used_twice_accumulates() {
    // f(x) = sum(x ⊙ x) + sum(x W): both paths must contribute to dx.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 2, 3);
    let w = random(&mut rng, 3, 2);
    let report = check_gradients(&[x.clone(), w], 1e-5, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let a = t.reduce(Reduction::Sum, sq)?;
        let p = t.matmul(v[0], v[1])?;
        let b = t.reduce(Reduction::Sum, p)?;
        t.add(a, b)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad());
    let sq = tape.mul(xv, xv).unwrap();
    let l = tape.reduce(Reduction::Sum, sq).unwrap();
    let g = tape.backward(l).unwrap();
    for (gv, xv) in g.get(0).unwrap().data().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-12);
    }
}

#[test]
fn every_op_matches_finite_differences() {
    type Case = (&'static str, Vec<(usize, usize)>, Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>);
    let sum = |t: &mut Tape, v: Var| t.reduce(Reduction::MeanSq, v);
    let cases: Vec<Case> = vec![
        ("matmul", vec![(3, 4), (4, 2)], Box::new(move |t, v| {
            let m = t.matmul(v[0], v[1])?;
            sum(t, m)
        })),
        ("add_row", vec![(3, 4), (1, 4)], Box::new(move |t, v| {
            let m = t.add(v[0], v[1])?;
            sum(t, m)
        })),
        ("sub_col", vec![(3, 4), (3, 1)], Box::new(move |t, v| {
            let m = t.sub(v[0], v[1])?;
            sum(t, m)
        })),
        ("mul_scalar", vec![(3, 4), (1, 1)], Box::new(move |t, v| {
            let m = t.mul(v[0], v[1])?;
            sum(t, m)
        })),
        ("hadamard", vec![(3, 4), (3, 4)], Box::new(move |t, v| {
            let m = t.mul(v[0], v[1])?;
            sum(t, m)
        })),
        ("sigmoid", vec![(3, 4)], Box::new(move |t, v| {
            let m = t.sigmoid(v[0])?;
            sum(t, m)
        })),
        ("tanh", vec![(3, 4)], Box::new(move |t, v| {
            let m = t.tanh(v[0])?;
            sum(t, m)
        })),
        ("relu", vec![(3, 4)], Box::new(move |t, v| {
            let m = t.activation(Activation::Relu, v[0])?;
            sum(t, m)
        })),
        ("leaky_relu", vec![(3, 4)], Box::new(move |t, v| {
            let m = t.activation(Activation::leaky_relu(), v[0])?;
            sum(t, m)
        })),
        ("softmax", vec![(3, 4), (3, 4)], Box::new(move |t, v| {
            let m = t.softmax_rows(v[0])?;
            let w = t.mul(m, v[1])?;
            t.reduce(Reduction::Sum, w)
        })),
        ("mean", vec![(3, 4)], Box::new(|t, v| {
            let s = t.mul(v[0], v[0])?;
            t.reduce(Reduction::Mean, s)
        })),
        ("mean_abs", vec![(3, 4)], Box::new(|t, v| t.reduce(Reduction::MeanAbs, v[0]))),
        ("affine", vec![(3, 4)], Box::new(move |t, v| {
            let m = t.affine(v[0], -1.5, 0.25)?;
            sum(t, m)
        })),
        ("transpose", vec![(3, 4), (3, 4)], Box::new(move |t, v| {
            let a = t.transpose(v[0])?;
            let m = t.matmul(a, v[1])?;
            sum(t, m)
        })),
        ("row_sums_powf", vec![(3, 4)], Box::new(move |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let pos = t.affine(sq, 1.0, 1.0)?;
            let r = t.row_sums(pos)?;
            let p = t.powf(r, -0.5)?;
            sum(t, p)
        })),
        ("concat_slice", vec![(3, 2), (3, 3)], Box::new(move |t, v| {
            let c = t.concat_cols(&[v[0], v[1], v[0]])?;
            let s = t.slice_cols(c, 1, 3)?;
            let q = t.mul(s, s)?;
            let c2 = t.tanh(c)?;
            let a = t.reduce(Reduction::Sum, q)?;
            let b = sum(t, c2)?;
            t.add(a, b)
        })),
        ("gather_reshape", vec![(3, 2)], Box::new(move |t, v| {
            let g = t.gather_rows(v[0], &[0, 0, 2, 1, 2, 2])?;
            let r = t.reshape(g, 3, 4)?;
            let s = t.sigmoid(r)?;
            sum(t, s)
        })),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, shapes, f) in cases {
        for _ in 0..3 {
            let params: Vec<Tensor> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
            let report = check_gradients(&params, 1e-5, &f).unwrap();
            assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
        }
    }
}

#[test]
fn accumulate_into_requires_matching_targets() {
    let mut tape = Tape::new();
    let mut w = Tensor::filled(1, 2, 1.0).with_grad();
    let v = tape.leaf(&w);
    let l = tape.reduce(Reduction::Sum, v).unwrap();
    let g = tape.backward(l).unwrap();
    g.accumulate_into([&mut w]).unwrap();
    g.accumulate_into([&mut w]).unwrap();
    assert_eq!(w.grad().unwrap(), &[2.0, 2.0]);
    let mut constant = Tensor::zeros(1, 2);
    assert!(g.accumulate_into([&mut constant]).is_err());
}

#[test]
fn determinism_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = random(&mut rng, 4, 5).with_grad();
        let b = random(&mut rng, 5, 3).with_grad();
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
        let m = tape.matmul(av, bv).unwrap();
        let s = tape.softmax_rows(m).unwrap();
        let t = tape.tanh(s).unwrap();
        let l = tape.reduce(Reduction::MeanSq, t).unwrap();
        let value = tape.value(l).unwrap().item().unwrap();
        let g = tape.backward(l).unwrap();
        let bits: Vec<u64> = g.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
        (value.to_bits(), bits)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let a = Tensor::row(row.clone());
        let s = eval1(&a, |t, v| t.softmax_rows(v));
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let shifted = Tensor::row(row.iter().map(|x| x + shift).collect());
        let s2 = eval1(&shifted, |t, v| t.softmax_rows(v));
        prop_assert!(s.max_abs_diff(&s2) <= 1e-12);
    }

    #[test]
    fn forward_ops_stay_finite(vals in proptest::collection::vec(-2.0f64..2.0, 6)) {
        let a = Tensor::new(2, 3, vals).unwrap();
        for kind in [Activation::Sigmoid, Activation::Tanh, Activation::Relu, Activation::leaky_relu()] {
            prop_assert!(eval1(&a, |t, v| t.activation(kind, v)).all_finite());
        }
        prop_assert!(eval1(&a, |t, v| t.softmax_rows(v)).all_finite());
    }
}
