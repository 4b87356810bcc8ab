// oracles index in lockstep on purpose
#![allow(clippy::needless_range_loop)]

use std::cell::Cell;

use mtevc_core::autodiff::kernels::{conv_transpose1d_forward, strided_conv1d, TransposedGeom};
use mtevc_core::autodiff::layers::{dense, embedding, lstm_sequence, BiLstm, Direction, Lstm};
use mtevc_core::autodiff::*;
use mtevc_core::{rng, Error};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    init::uniform(&mut r, shape, 1.0)
}

#[test]
fn dense_hand_arithmetic_and_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let w = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = g.input(t(&[1, 2], &[3.0, 3.0])).unwrap();
    let y = dense(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y), &[4.0, 5.0]);

    let xs = random(&[4, 3], 1);
    let x = g.input(xs.clone()).unwrap();
    let eye = g.input(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 })).unwrap();
    let zero = g.input(Tensor::zeros([1, 3])).unwrap();
    let y = dense(&mut g, x, eye, zero).unwrap();
    assert_eq!(g.value(y), xs.data());

    let bad = g.input(Tensor::zeros([2, 3])).unwrap();
    assert!(matches!(g.matmul(x, bad), Err(Error::Shape(_))));
}

#[test]
fn conv1d_identity_and_shift() {
    let mut g = Graph::<f64>::new();
    let xs = random(&[2, 7], 2);
    let x = g.input(xs.clone()).unwrap();
    let eye = g.input(t(&[2, 2, 1], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = g.conv1d(x, eye, 1, true).unwrap();
    assert_eq!(g.value(y), xs.data());

    let seq = t(&[1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let x = g.input(seq).unwrap();
    // taps are ordered oldest first: [x[t-1], x[t]]
    let prev = g.input(t(&[1, 1, 2], &[1.0, 0.0])).unwrap();
    let y = g.conv1d(x, prev, 1, true).unwrap();
    assert_eq!(g.value(y), &[0.0, 1.0, 2.0, 3.0, 4.0]);

    let wrong = g.input(Tensor::zeros([1, 3, 2])).unwrap();
    assert!(g.conv1d(x, wrong, 1, true).is_err());
}

#[test]
fn causal_conv_stack_ignores_the_future() {
    let mut r = rng::seeded(3);
    for d in [1usize, 2, 4, 8] {
        let w1: Tensor<f64> = init::uniform(&mut r, &[3, 2, 2], 1.0);
        let w2: Tensor<f64> = init::uniform(&mut r, &[2, 3, 3], 1.0);
        let xs = random(&[2, 40], d as u64);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.input(x.clone()).unwrap();
            let a = g.input(w1.clone()).unwrap();
            let b = g.input(w2.clone()).unwrap();
            let h = g.conv1d(x, a, d, true).unwrap();
            let h = g.tanh(h).unwrap();
            let y = g.conv1d(h, b, d, true).unwrap();
            g.tensor(y)
        };
        let base = run(&xs);
        for pos in [0usize, 13, 39] {
            let mut p = xs.clone();
            p.data_mut()[pos] += 0.5;
            p.data_mut()[40 + pos] -= 0.25;
            let out = run(&p);
            for c in 0..2 {
                for tt in 0..40 {
                    let same = out.at(c, tt) == base.at(c, tt);
                    if tt < pos {
                        assert!(same, "d={d} pos={pos} t={tt}");
                    }
                }
            }
            assert_ne!(out.at(0, pos), base.at(0, pos));
        }
    }
}

#[test]
fn transposed_conv_length_identity_and_adjoint() {
    let mut g = Graph::<f64>::new();
    let xs = random(&[2, 3], 4);
    let x = g.input(xs.clone()).unwrap();
    let eye = g.input(t(&[2, 2, 1], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = g.conv_transpose1d(x, eye, 1).unwrap();
    assert_eq!(g.value(y), xs.data());
    let w = g.input(random(&[2, 4, 32], 5)).unwrap();
    let y = g.conv_transpose1d(x, w, 16).unwrap();
    assert_eq!(g.shape(y), &[4, 48]);

    for (stride, kernel) in [(16, 32), (4, 6), (3, 3), (2, 5)] {
        let geom = TransposedGeom { c_in: 3, c_out: 2, kernel, stride, crop: (kernel - stride) / 2, len: 5 };
        let w = random(&[3, 2, kernel], 6);
        let x = random(&[3, 5], 7);
        let y = random(&[2, 5 * stride], 8);
        let tx = conv_transpose1d_forward(&geom, x.data(), w.data());
        let cy = strided_conv1d(&geom, y.data(), w.data());
        let lhs: f64 = cy.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = tx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "stride {stride}: {lhs} vs {rhs}");
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step scalar LSTM with gate order input, forget, cell, output.
fn lstm_oracle(x: &Tensor<f64>, w_ih: &Tensor<f64>, w_hh: &Tensor<f64>, b: &Tensor<f64>, hidden: usize) -> Vec<Vec<f64>> {
    let (steps, d) = (x.rows(), x.cols());
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = Vec::new();
    for s in 0..steps {
        let mut z = vec![0.0; 4 * hidden];
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = b.data()[j];
            for i in 0..d {
                *zj += x.at(s, i) * w_ih.at(i, j);
            }
            for i in 0..hidden {
                *zj += h[i] * w_hh.at(i, j);
            }
        }
        for k in 0..hidden {
            let ig = sigmoid(z[k]);
            let fg = sigmoid(z[hidden + k]);
            let cand = z[2 * hidden + k].tanh();
            let og = sigmoid(z[3 * hidden + k]);
            c[k] = fg * c[k] + ig * cand;
            h[k] = og * c[k].tanh();
        }
        out.push(h.clone());
    }
    out
}

#[test]
fn lstm_matches_scalar_oracle() {
    let (x, w_ih, w_hh, b) = (random(&[3, 4], 9), random(&[4, 8], 10), random(&[2, 8], 11), random(&[1, 8], 12));
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = [&x, &w_ih, &w_hh, &b].iter().map(|v| g.input((*v).clone()).unwrap()).collect();
    let y = lstm_sequence(&mut g, vars[0], vars[1], vars[2], vars[3], 2, Direction::Forward).unwrap();
    let expect = lstm_oracle(&x, &w_ih, &w_hh, &b, 2);
    for s in 0..3 {
        for k in 0..2 {
            assert!((g.value(y)[s * 2 + k] - expect[s][k]).abs() < 1e-10);
        }
    }

    // reversing time gives the backward direction, read back in original order
    let rev = Tensor::from_rows(&[x.row(2), x.row(1), x.row(0)]).unwrap();
    let back = lstm_oracle(&rev, &w_ih, &w_hh, &b, 2);
    let y = lstm_sequence(&mut g, vars[0], vars[1], vars[2], vars[3], 2, Direction::Backward).unwrap();
    for s in 0..3 {
        for k in 0..2 {
            assert!((g.value(y)[s * 2 + k] - back[2 - s][k]).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_lstm_gives_zero_and_bilstm_concatenates() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::seeded(1);
    let lstm = Lstm::new(&mut store, "l", &mut r, 3, 2).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::with_params(&store);
    let x = g.input(random(&[5, 3], 2)).unwrap();
    let y = lstm.forward(&mut g, x, Direction::Forward).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let mut store = ParamStore::<f64>::new();
    let bi = BiLstm::new(&mut store, "bi", &mut r, 3, 4).unwrap();
    assert_eq!(store.get(store.id("bi/fwd/b").unwrap()).data()[4], 1.0, "forget bias starts at 1");
    let mut g = Graph::with_params(&store);
    let x = g.input(random(&[5, 3], 2)).unwrap();
    let y = bi.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[5, 8]);
}

#[test]
fn embedding_lookup_and_adjoint() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("table", Tensor::from_fn([5, 5], |i| if i % 6 == 0 { 1.0 } else { 0.0 })).unwrap();
    let mut g = Graph::with_params(&store);
    let table = g.param(id);
    let a = embedding(&mut g, table, 3).unwrap();
    let b = embedding(&mut g, table, 3).unwrap();
    assert_eq!(g.value(a), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    assert_eq!(g.value(a), g.value(b));
    assert!(matches!(embedding(&mut g, table, 5), Err(Error::UnknownCode { code: 5, limit: 5 })));
    let s = g.sum(a).unwrap();
    let grads = g.backward(s).unwrap();
    let gt = grads.param(id).unwrap();
    for r in 0..5 {
        for c in 0..5 {
            assert_eq!(gt[r * 5 + c], if r == 3 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn activation_and_loss_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 3], &[0.0, 1e6, -1e6])).unwrap();
    let y = g.softsign(x).unwrap();
    assert_eq!(g.value(y)[0], 0.0);
    assert!((g.value(y)[1] - 0.999999).abs() < 1e-9);
    assert!((g.value(y)[2] + 0.999999).abs() < 1e-9);

    let c = g.input(Tensor::full([2, 4], 3.0)).unwrap();
    let p = g.softmax(c).unwrap();
    assert!(g.value(p).iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let xs = random(&[3, 3], 3);
    let x = g.input(xs.clone()).unwrap();
    let l = g.l1_loss(x, xs.data()).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    assert!(matches!(g.l1_loss(x, &[0.0; 4]), Err(Error::Shape(_))));

    let logits = g.input(Tensor::from_fn([2, 256], |i| if i == 7 || i == 256 + 200 { 1e6 } else { 0.0 })).unwrap();
    let ce = g.cross_entropy(logits, &[7, 200]).unwrap();
    assert!(g.scalar(ce).abs() < 1e-9);
    assert!(matches!(g.cross_entropy(logits, &[7, 256]), Err(Error::UnknownCode { .. })));

    let z = g.input(Tensor::zeros([1, 4])).unwrap();
    let nll = g.gaussian_nll(z).unwrap();
    let expect = 2.0 * (2.0 * std::f64::consts::PI).ln();
    assert!((g.scalar(nll) - expect).abs() < 1e-12);
    assert!((expect - 3.6758).abs() < 1e-4);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 2], &[0.0, 1.0])).unwrap();
    assert!(matches!(g.log_abs(x), Err(Error::NonFinite(_))));
    let big = g.input(t(&[1, 1], &[1e300])).unwrap();
    assert!(matches!(g.exp(big), Err(Error::NonFinite(_))));
    assert!(Tensor::new([2], vec![1.0, 2.0, 3.0]).is_err());
}

#[test]
fn grad_check_exact_on_linear_loss_and_flags_nondeterminism() {
    let mut store = ParamStore::<f64>::new();
    store.add("p", random(&[3, 4], 1)).unwrap();
    let report = grad_check(
        &store,
        |g| {
            let p = g.param(store.id("p").unwrap());
            g.sum(p)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.params[0].max_abs_error < 1e-10);
    assert!(report.passed(1e-10));

    let calls = Cell::new(0u32);
    let report = grad_check(
        &store,
        |g| {
            calls.set(calls.get() + 1);
            let p = g.param(store.id("p").unwrap());
            g.add_scalar(p, calls.get() as f64 * 1e-3).and_then(|s| g.sum(s))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.deterministic);
    assert!(!report.passed(1.0));
}

#[test]
fn adam_first_step_zero_gradient_and_missing_gradient() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", t(&[1, 1], &[0.5])).unwrap();
    let mut opt = AdamState::new(AdamConfig::default(), &store);
    let grads = {
        let mut g = Graph::with_params(&store);
        let v = g.param(p);
        g.backward(v).unwrap()
    };
    opt.update(&mut store, &grads).unwrap();
    assert!((store.get(p).data()[0] - (0.5 - 1e-3)).abs() < 1e-10);
    assert_eq!(opt.step, 1);

    let zero = {
        let mut g = Graph::with_params(&store);
        let v = g.param(p);
        let z = g.scale(v, 0.0).unwrap();
        g.sum(z).map(|s| g.backward(s).unwrap()).unwrap()
    };
    let mut fresh = AdamState::new(AdamConfig::default(), &store);
    let before = store.get(p).data()[0];
    fresh.update(&mut store, &zero).unwrap();
    assert_eq!(store.get(p).data()[0], before);

    let q = store.add("q", t(&[1, 1], &[1.0])).unwrap();
    let partial = {
        let mut g = Graph::with_params(&store);
        let v = g.param(q);
        g.backward(v).unwrap()
    };
    let mut opt = AdamState::new(AdamConfig::default(), &store);
    assert!(matches!(opt.update(&mut store, &partial), Err(Error::State(_))));
}

#[test]
fn adam_descends_quadratic_bowl_and_decays() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", t(&[1, 1], &[1.0])).unwrap();
    let mut opt = AdamState::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, &store);
    for _ in 0..500 {
        let grads = {
            let mut g = Graph::with_params(&store);
            let v = g.param(p);
            let sq = g.square(v).unwrap();
            g.backward(sq).unwrap()
        };
        opt.update(&mut store, &grads).unwrap();
    }
    assert!(store.get(p).data()[0].abs() < 1e-2);

    let mut cfg = AdamConfig::vocoder();
    cfg.decay_every = Some(10);
    let mut opt = AdamState::new(cfg, &store);
    opt.step = 25;
    assert!((opt.current_lr() - 0.25e-3).abs() < 1e-15);
}

#[test]
fn gradients_clip_by_global_norm() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", t(&[1, 2], &[3.0, 4.0])).unwrap();
    let mut g = Graph::with_params(&store);
    let v = g.param(p);
    let w = g.input(t(&[1, 2], &[3.0, 4.0])).unwrap();
    let m = g.mul(v, w).unwrap();
    let s = g.sum(m).unwrap();
    let mut grads = g.backward(s).unwrap();
    assert!((grads.global_norm() - 5.0).abs() < 1e-12);
    let before = grads.clip_global_norm(1.0);
    assert!((before - 5.0).abs() < 1e-12);
    assert!((grads.global_norm() - 1.0).abs() < 1e-12);
}

#[test]
fn param_store_rejects_duplicates_and_casts() {
    let mut store = ParamStore::<f64>::new();
    store.add("a", Tensor::zeros([2])).unwrap();
    assert!(store.add("a", Tensor::zeros([2])).is_err());
    let f: ParamStore<f32> = store.cast();
    assert_eq!(f.names(), vec!["a".to_string()]);
    assert!(store.set(store.id("a").unwrap(), Tensor::zeros([3])).is_err());
}
