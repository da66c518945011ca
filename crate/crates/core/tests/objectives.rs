use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fsp::objectives::{
    compute_loss, fsp_bce_loss, fsp_bce_target, fsp_revlm_aux, mtp_skip_target, ntp_loss,
    FutureSummaryTarget, ObjectiveContext, ObjectiveKind, ObjectiveSpec, SummarySource,
    TeacherLayer, TfIdfTable, Weighting,
};
use fsp::teacher::extract_summaries;
use fsp::tensor::{AdamW, AdamWConfig, Tape, Tensor};
use fsp::{Model, ModelConfig, TokenBatch};

const V: usize = 9;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        mlp_factor: 2,
        ..ModelConfig::gpt_mini(V, 16)
    }
}

fn objectives() -> Vec<ObjectiveSpec> {
    [
        ObjectiveKind::Ntp,
        ObjectiveKind::Mtp { n_aux: 2 },
        ObjectiveKind::DsMtp { n_aux: 2 },
        ObjectiveKind::MtpSkip { tau: 4 },
        ObjectiveKind::FspBce {
            tau: 4,
            weighting: Weighting::TfIdf,
        },
        ObjectiveKind::FspBce {
            tau: 16,
            weighting: Weighting::Uniform,
        },
        ObjectiveKind::FspRevLm {
            teacher_checkpoint: "t".into(),
            teacher_layer: TeacherLayer::Last,
        },
    ]
    .into_iter()
    .map(ObjectiveSpec::new)
    .collect()
}

/// Summaries computed by a fixed random teacher, recomputed per batch.
struct RandomTeacher(Model<f64>);

impl SummarySource<f64> for RandomTeacher {
    fn summaries(&mut self, tokens: &TokenBatch) -> fsp::Result<FutureSummaryTarget<f64>> {
        extract_summaries(&self.0, tokens, TeacherLayer::Last)
    }

    fn width(&self) -> usize {
        self.0.config().d_model
    }
}

/// `(total, ntp, aux)` of one objective on one batch.
fn losses(
    spec: &ObjectiveSpec,
    tokens: &TokenBatch,
    mask: &[bool],
    seed: u64,
) -> (f64, f64, Option<f64>) {
    let model = Model::<f64>::new(spec.configure_model(&small()), seed).unwrap();
    let mut teacher = RandomTeacher(Model::new(small(), seed + 1).unwrap());
    let weights: Vec<f64> = (0..V).map(|i| 1.0 + i as f64 / 10.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = ObjectiveContext {
        class_weights: Some(&weights),
        summaries: Some(&mut teacher),
        rng: &mut rng,
    };
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let parts = compute_loss(&model, &mut tape, &p, spec, tokens, mask, &mut ctx).unwrap();
    (
        tape.value(parts.total).item(),
        tape.value(parts.ntp).item(),
        parts.aux.map(|a| tape.value(a).item()),
    )
}

#[test]
fn ntp_loss_matches_positionwise_sum() {
    let tokens = TokenBatch::single(&[2, 0, 1]).unwrap();
    let logits =
        Tensor::from_f64(&[1, 3, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5, 0.3, 0.2, 0.1]).unwrap();
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = ntp_loss(&mut tape, l, &tokens, &[true, true, true]).unwrap();
    let nll = |row: &[f64], target: usize| {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        -(row[target].exp() / z).ln()
    };
    let d = logits.data();
    let oracle = (nll(&d[0..3], 0) + nll(&d[3..6], 1)) / 2.0;
    assert!((tape.value(loss).item() - oracle).abs() < 1e-10);
}

#[test]
fn bce_loss_matches_scalar_oracle() {
    let tokens = TokenBatch::single(&[0, 1, 2]).unwrap();
    let target = fsp_bce_target::<f64>(&tokens, 2, 3).unwrap();
    let ntp = Tensor::<f64>::zeros(&[1, 3, 3]);
    let aux_vals = [0.4, -1.2, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let aux = Tensor::from_f64(&[1, 3, 3], &aux_vals).unwrap();
    let w = [0.5, 1.0, 2.0];
    let mut tape = Tape::new();
    let (n, a) = (tape.leaf(ntp), tape.leaf(aux));
    let parts = fsp_bce_loss(
        &mut tape,
        n,
        a,
        &target,
        &w,
        &tokens,
        &[true, true, true],
        1.0,
    )
    .unwrap();
    let bits = [0.0, 0.0, 1.0];
    let mut bce = 0.0;
    for i in 0..3 {
        let s = 1.0 / (1.0 + (-aux_vals[i]).exp());
        bce -= w[i] * (bits[i] * s.ln() + (1.0 - bits[i]) * (1.0 - s).ln());
    }
    let total = 3f64.ln() + bce;
    assert!((tape.value(parts.total).item() - total).abs() < 1e-9);
    assert!((tape.value(parts.aux.unwrap()).item() - bce).abs() < 1e-9);
}

#[test]
fn bce_saturated_negatives_and_uniform_weights() {
    let tokens = TokenBatch::single(&[0, 0, 0, 0]).unwrap();
    let FutureSummaryTarget::MultiHot { bits, valid, .. } =
        fsp_bce_target::<f64>(&tokens, 3, 4).unwrap()
    else {
        unreachable!()
    };
    let zero_bits = vec![0u8; bits.len()];
    let empty = FutureSummaryTarget::MultiHot {
        vocab_size: 4,
        bits: zero_bits,
        valid,
    };
    let mut tape = Tape::new();
    let ntp = tape.leaf(Tensor::zeros(&[1, 4, 4]));
    let aux = tape.leaf(Tensor::full(&[1, 4, 4], -60.0));
    let ones = TfIdfTable::uniform(4).weights_as::<f64>();
    let parts = fsp_bce_loss(&mut tape, ntp, aux, &empty, &ones, &tokens, &[true; 4], 1.0).unwrap();
    assert!(tape.value(parts.aux.unwrap()).item() < 1e-20);
    assert_eq!(ones, vec![1.0; 4]);
}

#[test]
fn skip_offsets_are_uniform() {
    let row: Vec<u32> = (0..12).collect();
    let rows = vec![row; 1000];
    let tokens = TokenBatch::from_rows(&rows, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let tau = 6;
    let mut counts = [0usize; 5];
    for _ in 0..100 {
        let (targets, valid) = mtp_skip_target(&tokens, tau, &mut rng).unwrap();
        for b in 0..tokens.batch {
            let i = b * tokens.len + 3;
            assert!(valid[i]);
            counts[targets[i] as usize - 3 - 2] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    assert_eq!(n, 100_000);
    let expected = n as f64 / 5.0;
    let sigma = (n as f64 * 0.2 * 0.8).sqrt();
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    for &c in &counts {
        assert!((c as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
    }
    // 99.9th percentile of chi-squared with 4 degrees of freedom
    assert!(chi2 < 18.47, "chi2 {chi2}");
}

#[test]
fn revlm_step_on_aux_term_decreases_it() {
    let spec = ObjectiveSpec::new(ObjectiveKind::FspRevLm {
        teacher_checkpoint: "t".into(),
        teacher_layer: TeacherLayer::Last,
    });
    let mut model = Model::<f64>::new(spec.configure_model(&small()), 3).unwrap();
    let tokens = TokenBatch::from_rows(&[vec![1, 2, 3, 4, 5, 6], vec![7, 8, 1, 2]], 0).unwrap();
    let target = extract_summaries(
        &Model::<f64>::new(small(), 4).unwrap(),
        &tokens,
        TeacherLayer::Last,
    )
    .unwrap();
    let mask = vec![true; tokens.numel()];
    let aux_value = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, true);
        let h = m.forward_hidden(&mut tape, &p, &tokens).unwrap();
        let out = m.aux_forward(&mut tape, &p, h, 0, None).unwrap().out;
        let aux = fsp_revlm_aux(&mut tape, out, &target, &mask).unwrap();
        let value = tape.value(aux).item();
        tape.backward(aux).unwrap();
        let grads = p.grads(&mut tape);
        (value, grads, tape.value(out).clone(), out)
    };
    let (before, grads, _, _) = aux_value(&model);
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AdamW::new(AdamWConfig::default(), &shape_refs, model.decay_mask());
    opt.step(model.params_mut(), &grads, 1e-3).unwrap();
    let (after, ..) = aux_value(&model);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn masked_summary_rows_receive_no_gradient() {
    let tokens = TokenBatch::single(&[1, 2, 3, 4, 5]).unwrap();
    let target = extract_summaries(
        &Model::<f64>::new(small(), 4).unwrap(),
        &tokens,
        TeacherLayer::Last,
    )
    .unwrap();
    let mut tape = Tape::new();
    let pred = tape.leaf(Tensor::full(&[1, 5, 8], 0.3));
    let aux = fsp_revlm_aux(&mut tape, pred, &target, &[true; 5]).unwrap();
    tape.backward(aux).unwrap();
    let g = tape.grad(pred).unwrap();
    assert!(g[..3 * 8].iter().any(|&x| x != 0.0));
    assert!(g[3 * 8..].iter().all(|&x| x == 0.0));
}

#[test]
fn lambda_zero_total_equals_ntp() {
    let tokens = TokenBatch::from_rows(&[vec![1, 2, 3, 4, 5, 6, 7], vec![8, 1, 2, 3]], 0).unwrap();
    let mask = vec![true; tokens.numel()];
    for spec in objectives() {
        let (total, ntp, aux) = losses(&spec.clone().with_lambda(0.0), &tokens, &mask, 5);
        assert!((total - ntp).abs() <= 1e-12, "{}", spec.name());
        if !matches!(spec.kind, ObjectiveKind::Ntp) {
            assert!(aux.unwrap() > 0.0, "{}", spec.name());
        }
    }
}

#[test]
fn tfidf_weights_follow_document_frequency() {
    let docs: Vec<Vec<u32>> = vec![vec![1, 2, 2], vec![1, 3], vec![1, 2, 4]];
    let t = TfIdfTable::from_corpus(docs.iter().map(|d| d.as_slice()), 6).unwrap();
    let expected = |df: f64| (4.0 / (df + 1.0)).ln() + 1.0;
    for (tok, df) in [(0, 0.0), (1, 3.0), (2, 2.0), (3, 1.0), (4, 1.0), (5, 0.0)] {
        assert!((t.weights[tok] - expected(df)).abs() < 1e-12, "token {tok}");
    }
    assert_eq!(t.weights[1], 1.0);
    let max = t.weights.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(t.weights[0], max);
    assert_eq!(t.weights[5], max);
}

fn sequences() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..V as u32, 1..10), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bce_target_is_a_set_over_the_window(rows in sequences(), tau in 2usize..12, seed in any::<u64>()) {
        let tokens = TokenBatch::from_rows(&rows, 0).unwrap();
        let FutureSummaryTarget::MultiHot { bits, valid, .. } = fsp_bce_target::<f64>(&tokens, tau, V).unwrap() else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (b, x) in rows.iter().enumerate() {
            for t in 0..x.len() {
                let row = b * tokens.len + t;
                let bag = &bits[row * V..(row + 1) * V];
                prop_assert_eq!(valid[row], t + 2 < x.len());
                prop_assert_eq!(bag.contains(&1), t + 2 < x.len());
                for (i, &bit) in bag.iter().enumerate() {
                    let member = (t + 2..x.len()).filter(|&s| s <= t + tau).any(|s| x[s] as usize == i);
                    prop_assert_eq!(bit == 1, member);
                }
                if t + 2 < x.len() {
                    let end = (t + tau).min(x.len() - 1);
                    let mut y = x.clone();
                    for s in (t + 3..=end).rev() {
                        y.swap(s, rng.random_range(t + 2..=s));
                    }
                    let single = TokenBatch::single(&y).unwrap();
                    let FutureSummaryTarget::MultiHot { bits: b2, .. } = fsp_bce_target::<f64>(&single, tau, V).unwrap() else {
                        unreachable!()
                    };
                    prop_assert_eq!(&b2[t * V..(t + 1) * V], bag);
                }
            }
        }
    }

    #[test]
    fn tfidf_is_order_invariant(docs in prop::collection::vec(prop::collection::vec(0u32..V as u32, 1..6), 1..8), seed in any::<u64>()) {
        let a = TfIdfTable::from_corpus(docs.iter().map(|d| d.as_slice()), V).unwrap();
        let mut shuffled = docs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        for d in shuffled.iter_mut() {
            d.reverse();
        }
        let b = TfIdfTable::from_corpus(shuffled.iter().map(|d| d.as_slice()), V).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn padding_never_reaches_a_loss(rows in sequences(), seed in 0u64..1000) {
        let long: Vec<u32> = (0..12).map(|i| (i % V) as u32).collect();
        let mut with_long = rows.clone();
        with_long.push(long);
        let a = TokenBatch::from_rows(&with_long, 0).unwrap();
        let b = TokenBatch::from_rows(&with_long, 5).unwrap();
        let mask_for = |tb: &TokenBatch| -> Vec<bool> {
            (0..tb.numel()).map(|i| i % tb.len < tb.lengths[i / tb.len]).collect()
        };
        for spec in objectives() {
            let la = losses(&spec, &a, &mask_for(&a), seed);
            let lb = losses(&spec, &b, &mask_for(&b), seed);
            prop_assert_eq!(la.0.to_bits(), lb.0.to_bits(), "{}", spec.name());
        }
    }
}
