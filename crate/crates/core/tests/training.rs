mod common;

use proptest::prelude::*;
use rand::Rng;
use sepdgconv::architectures::{build, ArchSpec, Family};
use sepdgconv::autodiff::Graph;
use sepdgconv::data::Samples;
use sepdgconv::error::Error;
use sepdgconv::harness::{run_cell, Experiment};
use sepdgconv::layers::{BlockStrategy, ParamKind, ParamStore};
use sepdgconv::tensor::Tensor;
use sepdgconv::training::{
    class_weights, confusion_matrix, evaluate, metrics_from_confusion, train, LrSchedule, Optimizer, OptimizerKind,
    TrainConfig,
};

/// Two classes separated by the mean of channel 0.
fn toy_patches(n: usize, patch: usize, seed: u64) -> Samples {
    let mut r = common::rng(seed);
    let per = 2 * patch * patch;
    let mut x = Vec::with_capacity(n * per);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 2) as i64;
        let shift = if class == 1 { 0.8 } else { 0.2 };
        for p in 0..per {
            let base = if p < patch * patch { shift } else { 0.5 };
            x.push(base + r.gen_range(-0.1..0.1));
        }
        y.push(class);
    }
    Samples { x: Tensor::new(vec![n, 2, patch, patch], x).unwrap(), y }
}

fn config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::adam(),
        schedule: LrSchedule::constant(lr),
        epochs,
        batch_size: 16,
        seeds: vec![42],
        ..TrainConfig::default()
    }
}

fn mini(in_ch: usize, classes: usize) -> ArchSpec {
    ArchSpec::new(Family::ResNet18, 0.125, in_ch, classes, BlockStrategy::SepDgConv)
}

/// Plain gradient-descent logistic regression on flattened samples.
fn logistic_regression_train_oa(s: &Samples, steps: usize, lr: f64) -> f64 {
    let d = s.x.len() / s.len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let row = |i: usize| &s.x.data()[i * d..(i + 1) * d];
    for _ in 0..steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for i in 0..s.len() {
            let z: f64 = row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - s.y[i] as f64;
            for (g, v) in gw.iter_mut().zip(row(i)) {
                *g += err * v;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / s.len() as f64;
        }
        b -= lr * gb / s.len() as f64;
    }
    let correct = (0..s.len())
        .filter(|&i| {
            let z: f64 = row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z >= 0.0) == (s.y[i] == 1)
        })
        .count();
    correct as f64 / s.len() as f64
}

#[test]
fn separable_toy_set_is_fitted() {
    let data = toy_patches(64, 5, 3);
    assert!(logistic_regression_train_oa(&data, 500, 1.0) >= 0.99);
    let mut net = build(&mini(2, 2), 42).unwrap();
    let log = train(&mut net, &data, None, &config(50, 1e-3), 42).unwrap();
    assert_eq!(log.len(), 50);
    assert!(evaluate(&mut net, &data).unwrap().oa >= 0.99);
}

#[test]
fn zero_epochs_and_zero_rate_leave_parameters() {
    let data = toy_patches(16, 5, 4);
    let mut net = build(&mini(2, 2), 1).unwrap();
    let before = net.state_tensors();
    assert!(train(&mut net, &data, None, &config(0, 1e-3), 1).unwrap().is_empty());
    assert_eq!(net.state_tensors(), before);
    for optimizer in [OptimizerKind::sgd(), OptimizerKind::adam()] {
        let mut net = build(&mini(2, 2), 1).unwrap();
        let cfg = TrainConfig { optimizer, ..config(2, 0.0) };
        train(&mut net, &data, None, &cfg, 1).unwrap();
        for (a, b) in net.store.entries().iter().zip(build(&mini(2, 2), 1).unwrap().store.entries()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = toy_patches(24, 5, 5);
    let test = toy_patches(8, 5, 6);
    let run = || {
        let mut net = build(&mini(2, 2), 9).unwrap();
        let log = train(&mut net, &data, Some(&test), &config(3, 1e-3), 9).unwrap();
        let bits: Vec<u64> =
            log.iter().flat_map(|e| [e.loss.to_bits(), e.train_oa.to_bits(), e.test_oa.to_bits()]).collect();
        (bits, net.state_tensors())
    };
    assert_eq!(run(), run());
}

#[test]
fn divergence_is_reported_and_isolated() {
    let data = toy_patches(16, 5, 7);
    let mut net = build(&mini(2, 2), 3).unwrap();
    let cfg = TrainConfig { optimizer: OptimizerKind::sgd(), ..config(5, 1e300) };
    assert!(matches!(train(&mut net, &data, None, &cfg, 3), Err(Error::TrainingFailure { .. })));

    let spec = mini(2, 2);
    let ds = sepdgconv::data::generate(&sepdgconv::data::GenSpec::new(
        vec![sepdgconv::data::ModalitySpec::new("a", 2, sepdgconv::data::SignalKind::SpectralSmooth, 0.0)],
        2,
        32,
        0,
        sepdgconv::data::Fusion::Separable,
    ))
    .unwrap();
    let exp = Experiment::new(ds, data.clone(), data, cfg, spec.clone());
    let (cell, _) = run_cell(&exp, &spec, 3, None).unwrap();
    assert!(cell.oa().is_nan() && cell.error.is_some());
}

#[test]
fn evaluation_rejects_empty_sets() {
    let mut net = build(&mini(2, 2), 1).unwrap();
    let empty = Samples { x: Tensor::zeros(&[0, 2, 5, 5]), y: Vec::new() };
    assert!(matches!(evaluate(&mut net, &empty), Err(Error::InvalidArgument(_))));
}

fn softmax_rows(z: &[f64], c: usize) -> Vec<f64> {
    z.chunks(c)
        .flat_map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

#[test]
fn sgd_matches_hand_derived_softmax_regression() {
    let mut r = common::rng(11);
    let (n, d, c) = (12, 4, 3);
    let x = common::rand_tensor(&mut r, &[n, d]);
    let y: Vec<i64> = (0..n).map(|_| r.gen_range(0..c as i64)).collect();
    for momentum in [0.0, 0.9] {
        let mut store = ParamStore::new();
        store.add("w", ParamKind::Weight, Tensor::zeros(&[c, d]));
        store.add("b", ParamKind::Bias, Tensor::zeros(&[c]));
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum }, &store);
        let (mut w, mut b) = (vec![0.0; c * d], vec![0.0; c]);
        let (mut vw, mut vb) = (vec![0.0; c * d], vec![0.0; c]);
        let lr = 0.3;
        for _ in 0..20 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.leaf(store.entries()[0].value.clone());
            let bv = g.leaf(store.entries()[1].value.clone());
            let z = g.linear(xv, wv, bv).unwrap();
            let l = g.weighted_cross_entropy(z, &y, &vec![1.0; c], None).unwrap();
            let grads = g.backward(l).unwrap();
            let (gw, gb) = (grads.get(wv).unwrap().clone(), grads.get(bv).unwrap().clone());
            opt.step(&mut store, &[(0, &gw), (1, &gb)], lr, 0.0, lr, 0.0);

            let logits: Vec<f64> = (0..n)
                .flat_map(|i| (0..c).map(move |k| (i, k)))
                .map(|(i, k)| b[k] + (0..d).map(|j| w[k * d + j] * x.data()[i * d + j]).sum::<f64>())
                .collect();
            let p = softmax_rows(&logits, c);
            let mut hw = vec![0.0; c * d];
            let mut hb = vec![0.0; c];
            for i in 0..n {
                for k in 0..c {
                    let e = (p[i * c + k] - f64::from(y[i] == k as i64)) / n as f64;
                    hb[k] += e;
                    for j in 0..d {
                        hw[k * d + j] += e * x.data()[i * d + j];
                    }
                }
            }
            for ((wi, vi), gi) in w.iter_mut().zip(vw.iter_mut()).zip(&hw) {
                *vi = momentum * *vi + gi;
                *wi -= lr * *vi;
            }
            for ((bi, vi), gi) in b.iter_mut().zip(vb.iter_mut()).zip(&hb) {
                *vi = momentum * *vi + gi;
                *bi -= lr * *vi;
            }
        }
        let dw = store.entries()[0].value.data().iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let db = store.entries()[1].value.data().iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dw <= 1e-9 && db <= 1e-9, "momentum {momentum}: {dw} {db}");
    }
}

#[test]
fn adam_matches_reference_recurrence() {
    let mut store = ParamStore::new();
    store.add("p", ParamKind::Weight, Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    let mut opt = Optimizer::new(OptimizerKind::adam(), &store);
    let (mut p, mut m, mut v) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
    for t in 1..=25 {
        let g = Tensor::new(vec![2], store.entries()[0].value.data().iter().map(|q| 2.0 * q).collect()).unwrap();
        opt.step(&mut store, &[(0, &g)], 0.05, 0.0, 0.05, 0.0);
        for i in 0..2 {
            let gi = 2.0 * p[i];
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            p[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
    }
    let got = store.entries()[0].value.data();
    assert!((got[0] - p[0]).abs() <= 1e-12 && (got[1] - p[1]).abs() <= 1e-12);
}

#[test]
fn gate_rate_and_decay_apply_only_to_gates() {
    let mut store = ParamStore::new();
    store.add("w", ParamKind::Weight, Tensor::full(&[1], 1.0));
    store.add("g", ParamKind::Gate, Tensor::full(&[1], 1.0));
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, &store);
    let zero = Tensor::zeros(&[1]);
    opt.step(&mut store, &[(0, &zero), (1, &zero)], 0.1, 0.5, 0.2, 0.0);
    assert!((store.entries()[0].value.item() - 0.95).abs() < 1e-15);
    assert_eq!(store.entries()[1].value.item(), 1.0);
}

#[test]
fn ignored_labels_do_not_affect_loss_or_gradients() {
    let mut r = common::rng(13);
    let logits = common::rand_tensor(&mut r, &[2, 3, 2, 2]);
    let ignore = [false, true, false, true, false, false, true, false];
    let a = [0i64, 1, 2, 0, 1, 2, 0, 1];
    let mut b = a;
    b[1] = 2;
    b[3] = 1;
    b[6] = 2;
    let run = |labels: &[i64], mask: Option<&[bool]>| {
        let mut g = Graph::new();
        let z = g.leaf(logits.clone());
        let l = g.weighted_cross_entropy(z, labels, &[0.4, 0.9, 0.2], mask).unwrap();
        let gz = g.backward(l).unwrap().get(z).unwrap().clone();
        (g.value(l).item().to_bits(), gz.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(&a, Some(&ignore)), run(&b, Some(&ignore)));
    let with_sentinel: Vec<i64> = a.iter().zip(&ignore).map(|(&l, &i)| if i { -1 } else { l }).collect();
    assert_eq!(run(&with_sentinel, None), run(&a, Some(&ignore)));
}

#[test]
fn uniform_weights_equal_unweighted_loss() {
    let mut r = common::rng(17);
    let (n, c) = (10, 4);
    let logits = common::rand_tensor(&mut r, &[n, c]);
    let y: Vec<i64> = (0..n).map(|_| r.gen_range(0..c as i64)).collect();
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.weighted_cross_entropy(z, &y, &vec![1.0; c], None).unwrap();
    let p = softmax_rows(logits.data(), c);
    let plain = -(0..n).map(|i| p[i * c + y[i] as usize].ln()).sum::<f64>() / n as f64;
    assert!((g.value(l).item() - plain).abs() <= 1e-9);
    assert_eq!(class_weights(&[25, 25, 25, 25]).unwrap(), vec![0.75; 4]);
}

#[test]
fn random_predictor_kappa_is_near_zero() {
    let mut r = common::rng(19);
    let c = 5;
    let truth: Vec<i64> = (0..10_000).map(|_| r.gen_range(0..c as i64)).collect();
    let pred: Vec<usize> = (0..10_000).map(|_| r.gen_range(0..c)).collect();
    let m = metrics_from_confusion(confusion_matrix(&truth, &pred, c)).unwrap();
    assert!(m.kappa.abs() <= 0.05, "kappa {}", m.kappa);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_stay_in_range(cells in proptest::collection::vec(0usize..20, 9)) {
        prop_assume!(cells.iter().sum::<usize>() > 0);
        let m: Vec<Vec<usize>> = cells.chunks(3).map(<[usize]>::to_vec).collect();
        let r = metrics_from_confusion(m).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.oa) && (0.0..=1.0).contains(&r.aa));
        prop_assert!((-1.0..=1.0).contains(&r.kappa));
        prop_assert!(r.f1.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn class_weights_follow_counts(counts in proptest::collection::vec(0usize..1000, 1..8)) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let total: usize = counts.iter().sum();
        let w = class_weights(&counts).unwrap();
        for (wc, &n) in w.iter().zip(&counts) {
            prop_assert!((wc - (1.0 - n as f64 / total as f64)).abs() <= 1e-15);
        }
    }

    #[test]
    fn normalization_lands_in_unit_interval(vals in proptest::collection::vec(-1e3f64..1e3, 12)) {
        let t = Tensor::new(vec![3, 2, 2], vals).unwrap();
        let n = sepdgconv::training::normalize_channels(&t);
        prop_assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = sepdgconv::training::normalize_channels(&n);
        prop_assert!(again.max_abs_diff(&n) <= 1e-12);
    }
}
