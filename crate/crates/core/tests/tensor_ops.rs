mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fsp::tensor::{clip_grad_norm, global_norm, AdamW, AdamWConfig, Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

#[test]
fn matmul_sum_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let a = random(&mut rng, &[3, 4], 1.0);
        let b = random(&mut rng, &[4, 2], 1.0);
        let err = common::gradcheck(
            &[a, b],
            |t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                t.sum(c)
            },
            1e-5,
            1e-8,
        );
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn layer_norm_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let x = random(&mut rng, &[3, 5], 2.0);
        let g = random(&mut rng, &[5], 1.0);
        let b = random(&mut rng, &[5], 1.0);
        let w: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = common::gradcheck(
            &[x, g, b],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                t.dot(y, &w).unwrap()
            },
            1e-5,
            1e-8,
        );
        assert!(err < 1e-5, "rel err {err}");
    }
}

#[test]
fn cross_entropy_matches_normalized_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&mut rng, &[4, 7], 5.0);
    let targets: Vec<u32> = (0..4).map(|_| rng.random_range(0..7)).collect();
    let mask = [true, false, true, true];
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.softmax_cross_entropy(l, &targets, &mask).unwrap();
    let mut oracle = 0.0;
    for r in 0..4 {
        if !mask[r] {
            continue;
        }
        let row = &logits.data()[r * 7..(r + 1) * 7];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        oracle -= (row[targets[r] as usize].exp() / z).ln();
    }
    oracle /= 3.0;
    assert!((tape.value(loss).item() - oracle).abs() < 1e-10);
}

#[test]
fn weighted_bce_matches_elementwise_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(&mut rng, &[3, 8], 6.0);
    let bits: Vec<u8> = (0..24).map(|_| rng.random_range(0..2)).collect();
    let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..3.0)).collect();
    let mask = [true, true, false];
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.weighted_sigmoid_bce(l, &bits, &w, &mask).unwrap();
    let mut oracle = 0.0;
    for r in 0..2 {
        for i in 0..8 {
            let z = logits.data()[r * 8 + i];
            let s = 1.0 / (1.0 + (-z).exp());
            let a = bits[r * 8 + i] as f64;
            oracle -= w[i] * (a * s.ln() + (1.0 - a) * (1.0 - s).ln());
        }
    }
    oracle /= 2.0;
    assert!((tape.value(loss).item() - oracle).abs() < 1e-9);
}

#[test]
fn l2_match_matches_explicit_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pred = random(&mut rng, &[5, 6], 2.0);
    let target = random(&mut rng, &[5, 6], 2.0);
    let mask = [true, false, true, true, false];
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let loss = tape.l2_match(p, &target, &mask).unwrap();
    let mut oracle = 0.0;
    for r in [0, 2, 3] {
        for h in 0..6 {
            let d = pred.data()[r * 6 + h] - target.data()[r * 6 + h];
            oracle += d * d / 6.0;
        }
    }
    oracle /= 3.0;
    let got = tape.value(loss).item();
    assert!((got - oracle).abs() / oracle < 1e-10);
}

#[test]
fn adamw_descends_on_a_quadratic() {
    let mut opt = AdamW::<f64>::new(
        AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        },
        &[&[1]],
        vec![false],
    );
    let mut w = vec![Tensor::full(&[1], 1.0)];
    let mut prev = 1.0f64;
    for step in 1..=10 {
        let g = vec![vec![2.0 * w[0].data()[0]]];
        opt.step(&mut w, &g, 0.1).unwrap();
        let now = w[0].data()[0].abs();
        assert!(now < prev, "step {step}: {now} >= {prev}");
        assert_eq!(opt.steps_taken(), step);
        prev = now;
    }
}

fn rows_strategy() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..6, 1usize..6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_shape_matches_data(shape in prop::collection::vec(0usize..4, 0..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        let well_formed = !shape.is_empty() && n > 0;
        prop_assert_eq!(Tensor::<f32>::new(shape.clone(), vec![0.0; n]).is_ok(), well_formed);
        if extra > 0 {
            prop_assert!(Tensor::<f32>::new(shape, vec![0.0; n + extra]).is_err());
        }
    }

    #[test]
    fn clipping_engages_iff_norm_exceeds_limit(
        grads in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 1..6), 1..4),
        max_norm in 0.1f64..4.0,
    ) {
        let before = global_norm(&grads);
        let mut g = grads.clone();
        let scale = clip_grad_norm(&mut g, max_norm);
        let after = global_norm(&g);
        if before > max_norm {
            prop_assert!(scale < 1.0);
            prop_assert!(after <= max_norm + 1e-9);
        } else {
            prop_assert_eq!(scale, 1.0);
            prop_assert_eq!(g, grads);
        }
    }

    #[test]
    fn losses_are_equivariant_under_row_permutation((rows, v, seed) in rows_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, &[rows, v], 4.0);
        let targets: Vec<u32> = (0..rows).map(|_| rng.random_range(0..v as u32)).collect();
        let bits: Vec<u8> = (0..rows * v).map(|_| rng.random_range(0..2)).collect();
        let w: Vec<f64> = (0..v).map(|_| rng.random_range(0.0..2.0)).collect();
        let target = random(&mut rng, &[rows, v], 1.0);
        let mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
        let mut perm: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |t: &Tensor<f64>| {
            let data = perm.iter().flat_map(|&r| t.data()[r * v..(r + 1) * v].to_vec()).collect();
            Tensor::new(vec![rows, v], data).unwrap()
        };
        let p_targets: Vec<u32> = perm.iter().map(|&r| targets[r]).collect();
        let p_bits: Vec<u8> = perm.iter().flat_map(|&r| bits[r * v..(r + 1) * v].to_vec()).collect();
        let p_mask: Vec<bool> = perm.iter().map(|&r| mask[r]).collect();

        let eval = |l: &Tensor<f64>, tg: &[u32], bt: &[u8], tv: &Tensor<f64>, m: &[bool]| {
            let mut tape = Tape::new();
            let x = tape.leaf(l.clone());
            let ce = tape.softmax_cross_entropy(x, tg, m).unwrap();
            let bce = tape.weighted_sigmoid_bce(x, bt, &w, m).unwrap();
            let l2 = tape.l2_match(x, tv, m).unwrap();
            [ce, bce, l2].map(|v| tape.value(v).item())
        };
        let a = eval(&logits, &targets, &bits, &target, &mask);
        let b = eval(&permute(&logits), &p_targets, &p_bits, &permute(&target), &p_mask);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn backward_grads_are_finite_and_shaped((rows, v, seed) in rows_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[rows, v], 50.0));
        let w = tape.leaf(random(&mut rng, &[v, v], 1.0));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let targets: Vec<u32> = (0..rows).map(|_| rng.random_range(0..v as u32)).collect();
        let loss = tape.softmax_cross_entropy(h, &targets, &vec![true; rows]).unwrap();
        tape.backward(loss).unwrap();
        for (var, n) in [(x, rows * v), (w, v * v)] {
            let g = tape.grad(var).unwrap();
            prop_assert_eq!(g.len(), n);
            prop_assert!(g.iter().all(|e| e.is_finite()));
        }
    }
}
