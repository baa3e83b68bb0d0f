use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradcheck::check_gradients;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop `x·W + b`.
fn affine_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..w.cols())
                .map(|j| b.get(0, j) + (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn normalize_zero_graph_is_identity() {
    for n in 1..6 {
        let out = normalized_adjacency(&Tensor::zeros(n, n)).unwrap();
        assert_eq!(out, Tensor::identity(n));
    }
}

#[test]
fn normalize_two_node_symmetric() {
    let out = normalized_adjacency(&Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]])).unwrap();
    for v in out.data() {
        assert!((v - 0.5).abs() <= 1e-12);
    }
}

#[test]
fn normalize_matches_entrywise_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let a = random(&mut rng, 5, 5, 0.0, 1.0);
        let out = normalized_adjacency(&a).unwrap();
        let hat = |i: usize, j: usize| a.get(i, j) + if i == j { 1.0 } else { 0.0 };
        let deg: Vec<f64> = (0..5).map(|i| (0..5).map(|j| hat(i, j)).sum()).collect();
        for i in 0..5 {
            for j in 0..5 {
                let expected = hat(i, j) / (deg[i] * deg[j]).sqrt();
                assert!((out.get(i, j) - expected).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn normalize_rejects_bad_input() {
    assert!(matches!(
        normalized_adjacency(&Tensor::zeros(2, 3)),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        normalized_adjacency(&Tensor::from_rows(&[[0.0, -1.0], [0.0, 0.0]])),
        Err(Error::Domain(_))
    ));
}

fn gcn_eval(layer: &GcnLayer, x: &Tensor, a: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape).unwrap();
    let (xv, av) = (tape.constant(x.clone()), tape.constant(a.clone()));
    let out = vars.forward(&mut tape, xv, av).unwrap();
    tape.value(out).unwrap().clone()
}

#[test]
fn gcn_isolated_nodes_reduce_to_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layer = GcnLayer::new(3, 2, Activation::Identity, &mut rng);
    let x = random(&mut rng, 4, 3, -1.0, 1.0);
    let out = gcn_eval(&layer, &x, &Tensor::zeros(4, 4));
    let expected = affine_oracle(&x, &layer.weight, &Tensor::zeros(1, 2));
    for i in 0..4 {
        for j in 0..2 {
            assert!((out.get(i, j) - expected[i][j]).abs() < 1e-14);
        }
    }

    let ident = GcnLayer {
        weight: Tensor::identity(3).with_grad(),
        activation: Activation::Relu,
    };
    let x = random(&mut rng, 4, 3, 0.0, 2.0);
    assert_eq!(gcn_eval(&ident, &x, &Tensor::zeros(4, 4)), x);
}

#[test]
fn gcn_line_graph_hand_oracle() {
    // 0 - 1 - 2, degrees with self loops (2, 3, 2)
    let a = Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
    let x = Tensor::from_rows(&[[1.0, -1.0], [2.0, 0.5], [3.0, 1.0]]);
    let layer = GcnLayer {
        weight: Tensor::from_rows(&[[2.0], [-4.0]]).with_grad(),
        activation: Activation::Relu,
    };
    // X·W = [6, 2, 2]
    let xw = [6.0, 2.0, 2.0];
    let s6 = 6.0f64.sqrt();
    let expected = [
        xw[0] / 2.0 + xw[1] / s6,
        xw[0] / s6 + xw[1] / 3.0 + xw[2] / s6,
        xw[1] / s6 + xw[2] / 2.0,
    ];
    let out = gcn_eval(&layer, &x, &a);
    for i in 0..3 {
        assert!((out.get(i, 0) - expected[i].max(0.0)).abs() < 1e-12);
    }
}

fn gru_eval(cell: &GruCell, x: &Tensor, h: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let vars = cell.bind(&mut tape).unwrap();
    let (xv, hv) = (tape.constant(x.clone()), tape.constant(h.clone()));
    let out = vars.step(&mut tape, xv, hv).unwrap();
    tape.value(out).unwrap().clone()
}

fn zero_gru(input: usize, hidden: usize) -> GruCell {
    let mut cell = GruCell::new(input, hidden, &mut ChaCha8Rng::seed_from_u64(0));
    for t in cell.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    cell
}

#[test]
fn gru_zero_weights() {
    let cell = zero_gru(3, 2);
    let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]]);
    let h = Tensor::from_rows(&[[0.8, -0.4], [2.0, 1.0]]);
    assert_eq!(gru_eval(&cell, &x, &h), h.map(|v| 0.5 * v));
    assert_eq!(gru_eval(&cell, &x, &Tensor::zeros(2, 2)), Tensor::zeros(2, 2));
}

/// Gate-by-gate GRU step with explicit loops.
fn gru_oracle(cell: &GruCell, x: &Tensor, h: &Tensor) -> (Tensor, Tensor) {
    let pre = |u: &Tensor, w: &Tensor, b: &Tensor, hh: &Tensor| {
        let a = affine_oracle(x, u, b);
        let c = affine_oracle(hh, w, &Tensor::zeros(1, w.cols()));
        let mut t = Tensor::zeros(x.rows(), w.cols());
        for i in 0..x.rows() {
            for j in 0..w.cols() {
                t.set(i, j, a[i][j] + c[i][j]);
            }
        }
        t
    };
    let z = pre(&cell.update_input, &cell.update_hidden, &cell.update_bias, h).map(sig);
    let r = pre(&cell.reset_input, &cell.reset_hidden, &cell.reset_bias, h).map(sig);
    let mut rh = h.clone();
    for k in 0..rh.len() {
        rh.data_mut()[k] *= r.data()[k];
    }
    let cand = pre(&cell.candidate_input, &cell.candidate_hidden, &cell.candidate_bias, &rh).map(f64::tanh);
    let mut out = h.clone();
    for k in 0..out.len() {
        let zk = z.data()[k];
        out.data_mut()[k] = (1.0 - zk) * h.data()[k] + zk * cand.data()[k];
    }
    (out, cand)
}

#[test]
fn gru_matches_gate_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cell = GruCell::new(3, 4, &mut rng);
    for b in [&mut cell.update_bias, &mut cell.reset_bias, &mut cell.candidate_bias] {
        *b = random(&mut rng, 1, 4, -0.5, 0.5).with_grad();
    }
    let x = random(&mut rng, 5, 3, -1.0, 1.0);
    let h = random(&mut rng, 5, 4, -1.0, 1.0);
    let (expected, _) = gru_oracle(&cell, &x, &h);
    assert!(gru_eval(&cell, &x, &h).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn gru_shape_mismatch() {
    let cell = zero_gru(3, 2);
    let mut tape = Tape::new();
    let vars = cell.bind(&mut tape).unwrap();
    let x = tape.constant(Tensor::zeros(2, 3));
    let h = tape.constant(Tensor::zeros(3, 2));
    assert!(matches!(vars.step(&mut tape, x, h), Err(Error::Shape { .. })));
}

fn attention_eval(head: &AttentionHead, hs: &[Tensor]) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape).unwrap();
    let hv: Vec<Var> = hs.iter().map(|h| tape.constant(h.clone())).collect();
    let (c, w) = vars.pool(&mut tape, &hv).unwrap();
    (tape.value(c).unwrap().clone(), tape.value(w).unwrap().clone())
}

#[test]
fn attention_single_step_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = AttentionHead::new(3, 4, &mut rng);
    let h = random(&mut rng, 2, 3, -1.0, 1.0);
    let (c, w) = attention_eval(&head, std::slice::from_ref(&h));
    assert_eq!(c, h);
    assert_eq!(w.data(), &[1.0]);
}

#[test]
fn attention_identical_steps_return_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let head = AttentionHead::new(3, 5, &mut rng);
        let h = random(&mut rng, 4, 3, -2.0, 2.0);
        let (c, w) = attention_eval(&head, &[h.clone(), h.clone(), h.clone(), h.clone()]);
        assert!(c.max_abs_diff(&h) <= 1e-12);
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn attention_hand_oracle() {
    // H = 2, attention width 2; hand-set weights.
    let head = AttentionHead {
        projection: Linear {
            weight: Tensor::from_rows(&[[1.0, 0.0], [0.5, -1.0]]).with_grad(),
            bias: Tensor::row(vec![0.1, 0.0]).with_grad(),
        },
        score: Linear {
            weight: Tensor::from_rows(&[[2.0], [1.0]]).with_grad(),
            bias: Tensor::row(vec![-0.3]).with_grad(),
        },
    };
    let hs = [
        Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
        Tensor::from_rows(&[[0.5, 0.5], [-1.0, 2.0]]),
        Tensor::from_rows(&[[0.0, 0.0], [2.0, -1.0]]),
    ];
    let score = |h: &Tensor| {
        let mut total = 0.0;
        for i in 0..2 {
            let (a, b) = (h.get(i, 0), h.get(i, 1));
            let u0 = (a * 1.0 + b * 0.5 + 0.1).tanh();
            let u1 = (a * 0.0 + b * -1.0).tanh();
            total += 2.0 * u0 + u1 - 0.3;
        }
        total / 2.0
    };
    let s: Vec<f64> = hs.iter().map(score).collect();
    let z: f64 = s.iter().map(|v| v.exp()).sum();
    let alpha: Vec<f64> = s.iter().map(|v| v.exp() / z).collect();
    let (c, w) = attention_eval(&head, &hs);
    for t in 0..3 {
        assert!((w.data()[t] - alpha[t]).abs() < 1e-14);
    }
    for k in 0..4 {
        let expected: f64 = (0..3).map(|t| alpha[t] * hs[t].data()[k]).sum();
        assert!((c.data()[k] - expected).abs() < 1e-14);
    }
}

#[test]
fn attention_empty_sequence_is_domain_error() {
    let head = AttentionHead::new(2, 2, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape).unwrap();
    assert!(matches!(vars.pool(&mut tape, &[]), Err(Error::Domain(_))));
}

fn mlp_eval(net: &Mlp, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape).unwrap();
    let xv = tape.constant(x.clone());
    let out = vars.forward(&mut tape, xv).unwrap();
    tape.value(out).unwrap().clone()
}

#[test]
fn mlp_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = Mlp::new(&[4, 6, 3], Activation::leaky_relu(), Activation::Sigmoid, &mut rng);
    for t in net.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = random(&mut rng, 5, 4, -3.0, 3.0);
    assert!(mlp_eval(&net, &x).data().iter().all(|&v| v == 0.5));

    let ident = Mlp {
        layers: vec![Linear {
            weight: Tensor::identity(3).with_grad(),
            bias: Tensor::zeros(1, 3).with_grad(),
        }],
        hidden: Activation::Relu,
        output: Activation::Identity,
    };
    let x = random(&mut rng, 2, 3, -1.0, 1.0);
    assert_eq!(mlp_eval(&ident, &x), x);
}

#[test]
fn mlp_two_layer_hand_oracle() {
    let net = Mlp {
        layers: vec![
            Linear {
                weight: Tensor::from_rows(&[[1.0, -1.0], [2.0, 0.5]]).with_grad(),
                bias: Tensor::row(vec![0.0, 1.0]).with_grad(),
            },
            Linear {
                weight: Tensor::from_rows(&[[3.0], [-2.0]]).with_grad(),
                bias: Tensor::row(vec![0.5]).with_grad(),
            },
        ],
        hidden: Activation::LeakyRelu { slope: 0.01 },
        output: Activation::Identity,
    };
    let x = Tensor::from_rows(&[[1.0, 1.0], [-2.0, 0.0]]);
    // row 0: hidden (3, 0.5) -> 9 - 1 + 0.5 = 8.5
    // row 1: hidden (-2, 3) -> leaky (-0.02, 3) -> -0.06 - 6 + 0.5 = -5.56
    let out = mlp_eval(&net, &x);
    assert!((out.get(0, 0) - 8.5).abs() < 1e-12);
    assert!((out.get(1, 0) - -5.56).abs() < 1e-12);
}

#[test]
fn mlp_input_mismatch_is_shape_error() {
    let net = Mlp::new(&[3, 2], Activation::Relu, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape).unwrap();
    let x = tape.constant(Tensor::zeros(2, 4));
    assert!(matches!(vars.forward(&mut tape, x), Err(Error::Shape { .. })));
}

fn tensors_of<M: Module>(m: &M) -> Vec<Tensor> {
    m.named_tensors().into_iter().map(|(_, t)| t.detached()).collect()
}

#[test]
fn layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..3 {
        let (n, d, h) = (4, 3, 5);
        let x = random(&mut rng, n, d, -2.0, 2.0);
        let a = random(&mut rng, n, n, 0.0, 1.0);

        // GCN: weight and the (differentiable) adjacency itself.
        let gcn = GcnLayer::new(d, h, Activation::Tanh, &mut rng);
        let mut params = tensors_of(&gcn);
        params.push(a.clone());
        let report = check_gradients(&params, 1e-5, |t, v| {
            let vars = gcn.vars_from(&mut v[..1].iter().copied())?;
            let xv = t.constant(x.clone());
            let out = vars.forward(t, xv, v[1])?;
            t.reduce(Reduction::MeanSq, out)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "gcn {report:?}");

        let gru = GruCell::new(d, h, &mut rng);
        let h0 = random(&mut rng, n, h, -1.0, 1.0);
        let mut params = tensors_of(&gru);
        params.push(x.clone());
        params.push(h0);
        let report = check_gradients(&params, 1e-5, |t, v| {
            let vars = gru.vars_from(&mut v[..9].iter().copied())?;
            let h1 = vars.step(t, v[9], v[10])?;
            let h2 = vars.step(t, v[9], h1)?;
            t.reduce(Reduction::MeanSq, h2)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "gru {report:?}");

        let head = AttentionHead::new(h, 4, &mut rng);
        let hs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, n, h, -1.0, 1.0)).collect();
        let mut params = tensors_of(&head);
        params.extend(hs.iter().cloned());
        let report = check_gradients(&params, 1e-5, |t, v| {
            let vars = head.vars_from(&mut v[..4].iter().copied())?;
            let (c, _) = vars.pool(t, &v[4..])?;
            t.reduce(Reduction::MeanSq, c)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "attention {report:?}");

        let mlp = Mlp::new(&[d, 6, 6, 2], Activation::leaky_relu(), Activation::Sigmoid, &mut rng);
        let params = tensors_of(&mlp);
        let report = check_gradients(&params, 1e-5, |t, v| {
            let vars = mlp.vars_from(&mut v.iter().copied())?;
            let xv = t.constant(x.clone());
            let out = vars.forward(t, xv)?;
            t.reduce(Reduction::MeanSq, out)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "mlp {report:?}");
    }
}

proptest! {
    #[test]
    fn symmetric_adjacency_normalizes_symmetric(vals in proptest::collection::vec(0.0f64..1.0, 16)) {
        let mut a = Tensor::new(4, 4, vals).unwrap();
        for i in 0..4 {
            for j in 0..i {
                let v = a.get(i, j);
                a.set(j, i, v);
            }
        }
        let out = normalized_adjacency(&a).unwrap();
        prop_assert!(out.max_abs_diff(&out.transpose()) <= 1e-12);
    }

    #[test]
    fn gru_output_is_convex_combination(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = GruCell::new(3, 4, &mut rng);
        let x = random(&mut rng, 3, 3, -2.0, 2.0);
        let h = random(&mut rng, 3, 4, -2.0, 2.0);
        let out = gru_eval(&cell, &x, &h);
        let (_, cand) = gru_oracle(&cell, &x, &h);
        for k in 0..out.len() {
            let (lo, hi) = {
                let (p, q) = (h.data()[k], cand.data()[k]);
                (p.min(q), p.max(q))
            };
            prop_assert!(out.data()[k] >= lo - 1e-12 && out.data()[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn attention_weights_form_distribution(seed in 0u64..10_000, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = AttentionHead::new(3, 4, &mut rng);
        let hs: Vec<Tensor> = (0..k).map(|_| random(&mut rng, 2, 3, -2.0, 2.0)).collect();
        let (_, w) = attention_eval(&head, &hs);
        prop_assert!(w.data().iter().all(|&v| v >= 0.0));
        prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn scalar_attention_context_in_convex_hull(seed in 0u64..10_000, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = AttentionHead::new(1, 3, &mut rng);
        let hs: Vec<Tensor> = (0..k).map(|_| random(&mut rng, 1, 1, -5.0, 5.0)).collect();
        let (c, _) = attention_eval(&head, &hs);
        let lo = hs.iter().map(|h| h.data()[0]).fold(f64::INFINITY, f64::min);
        let hi = hs.iter().map(|h| h.data()[0]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(c.data()[0] >= lo - 1e-12 && c.data()[0] <= hi + 1e-12);
    }
}
