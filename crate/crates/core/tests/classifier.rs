mod common;

use common::{adam_reference, blobs, gradient_check};
use histoclass::classifier::*;
use histoclass::dataset::ClassLabel;
use histoclass::fsio::KeyValues;
use histoclass::rng::SplitMix64;
use nalgebra::{DMatrix, RowDVector};
use proptest::prelude::*;

#[test]
fn gradients_match_central_differences() {
    for seed in 0..10 {
        let rel = gradient_check(seed, 1e-5);
        println!("instance {seed}: rel {rel:.3e}");
        assert!(rel <= 1e-6, "instance {seed}: {rel}");
    }
}

#[test]
fn forward_matches_matrix_oracle() {
    let mut rng = SplitMix64::new(11);
    let mut m = init_mlp(7, 3).unwrap();
    for b in m.b1.iter_mut().chain(m.b2.iter_mut()) {
        *b = rng.uniform(-0.5, 0.5);
    }
    let x: Vec<f64> = (0..7).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let w1 = DMatrix::from_row_slice(7, HIDDEN, &m.w1);
    let w2 = DMatrix::from_row_slice(HIDDEN, CLASSES, &m.w2);
    let z = RowDVector::from_row_slice(&x) * &w1 + RowDVector::from_row_slice(&m.b1);
    let h = z.map(|v| v.max(0.0));
    let logits = &h * &w2 + RowDVector::from_row_slice(&m.b2);

    let (hid, out) = m.forward(&x, None).unwrap();
    for j in 0..HIDDEN {
        assert!((hid[j] - h[j]).abs() <= 1e-12);
    }
    for k in 0..CLASSES {
        assert!((out[k] - logits[k]).abs() <= 1e-12);
    }
}

#[test]
fn duplicating_the_batch_changes_nothing() {
    let m = init_mlp(5, 9).unwrap();
    let mut rng = SplitMix64::new(2);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gaussian()).collect()).collect();
    let ys = [ClassLabel::Benign, ClassLabel::Invasive, ClassLabel::Normal];
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let (l1, g1) = loss_and_grad(&m, &refs, &ys, None).unwrap();
    let doubled: Vec<&[f64]> = refs.iter().chain(&refs).copied().collect();
    let ys2: Vec<ClassLabel> = ys.iter().chain(&ys).copied().collect();
    let (l2, g2) = loss_and_grad(&m, &doubled, &ys2, None).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    for (a, b) in g1.tensors().iter().zip(g2.tensors().iter()) {
        assert!(common::max_abs_diff(a, b) < 1e-14);
    }
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let m = init_mlp(6, 21).unwrap();
    let x = [0.4, -0.3, 1.2, 0.0, -0.8, 0.5];
    let (plain, _) = m.forward(&x, None).unwrap();
    let mut rng = SplitMix64::new(5);
    let n = 20_000;
    let mut mean = vec![0.0; HIDDEN];
    for _ in 0..n {
        let mask = DropoutMask::sample(&mut rng, HIDDEN, 0.5);
        let (h, _) = m.forward(&x, Some(&mask)).unwrap();
        for (acc, v) in mean.iter_mut().zip(&h) {
            *acc += v / n as f64;
        }
    }
    for (a, b) in mean.iter().zip(&plain) {
        // per-unit standard error is b / sqrt(n) at rate 0.5
        assert!((a - b).abs() <= 5.0 * b / (n as f64).sqrt() + 1e-15, "{a} vs {b}");
    }
}

#[test]
fn adam_matches_scalar_reference() {
    let cfg = TrainConfig::default().adam();
    let grads = [1.0, 0.5, -0.25, 2.0, 0.0, -1.5, 0.75, 0.1, -0.05, 3.0];
    let want = adam_reference(0.0, &grads, &cfg);
    let mut theta = [0.0];
    let mut st = AdamState::new(&[1]);
    for (t, g) in grads.iter().enumerate() {
        adam_step(&mut [&mut theta], &[&[*g]], &mut st, &cfg).unwrap();
        assert!((theta[0] - want[t]).abs() <= 1e-15, "step {t}");
    }
    let two = adam_reference(0.0, &[1.0, 1.0], &cfg);
    let mut theta = [0.0];
    let mut st = AdamState::new(&[1]);
    for _ in 0..2 {
        adam_step(&mut [&mut theta], &[&[1.0]], &mut st, &cfg).unwrap();
    }
    assert!((theta[0] - two[1]).abs() <= 1e-15);
}

#[test]
fn blobs_train_to_full_accuracy_deterministically() {
    let (xs, ys) = blobs(8, 50, 17);
    let cfg = TrainConfig {
        max_epochs: 200,
        seed: 99,
        ..Default::default()
    };
    let (m1, h1) = train(&xs, &ys, &cfg).unwrap();
    let (m2, h2) = train(&xs, &ys, &cfg).unwrap();
    let first_full = h1.epochs.iter().position(|e| e.accuracy == 1.0);
    println!("first 100% epoch: {first_full:?}");
    assert!(first_full.is_some());
    assert_eq!(h1.epochs.last().unwrap().accuracy, 1.0);
    assert_eq!(h1.epochs.len(), 200);
    for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    }
    assert_eq!(m1, m2);
    let (m3, _) = train(&xs, &ys, &TrainConfig { seed: 100, ..cfg }).unwrap();
    assert_ne!(m1, m3);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = init_mlp(12, 4).unwrap();
    m.save(dir.path(), &TrainConfig::default().to_key_values()).unwrap();
    assert_eq!(MlpModel::load(dir.path()).unwrap(), m);
    let meta = KeyValues::load(&dir.path().join("model.meta")).unwrap();
    assert_eq!(meta.get("input_dim"), Some("12"));
    assert_eq!(meta.get("batch_size"), Some("32"));
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        l in prop::array::uniform4(-50.0f64..50.0),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&l);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let q = softmax(&l.map(|v| v + shift));
        prop_assert_eq!(argmax(&p), argmax(&q));
        for k in 0..4 {
            prop_assert!((p[k] - q[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn predicted_probabilities_sum_to_one(seed in any::<u64>()) {
        let m = init_mlp(4, seed).unwrap();
        let mut r = SplitMix64::new(seed);
        let x: Vec<f64> = (0..4).map(|_| r.uniform(-3.0, 3.0)).collect();
        let (label, p) = predict(&m, &x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(label.ordinal(), argmax(&p));
    }
}
