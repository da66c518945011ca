use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fsp::evaluation::{
    convergence_ratio, greedy_decode, greedy_decode_batch, mean_se, path_exact_match,
    sibling_coherence, ConvergenceRatio, EvalReport,
};
use fsp::tasks::dataset::generate_splits;
use fsp::tasks::{PathStarConfig, SiblingConfig, TaskSpec};
use fsp::{Model, ModelConfig};

fn model(vocab: usize, max_len: usize, seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        mlp_factor: 2,
        ..ModelConfig::gpt_mini(vocab, max_len)
    };
    Model::new(cfg, seed).unwrap()
}

#[test]
fn greedy_decoding_is_deterministic_and_batch_consistent() {
    let m = model(12, 32, 3);
    let prompts: Vec<Vec<u32>> = vec![vec![0, 5, 6], vec![0, 7], vec![0, 9, 10]];
    let refs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
    let batched = greedy_decode_batch(&m, &refs, 8, None).unwrap();
    for (p, b) in prompts.iter().zip(&batched) {
        let single = greedy_decode(&m, p, 8, None).unwrap();
        assert_eq!(&single, b);
        assert_eq!(single.len(), 8);
        assert_eq!(greedy_decode(&m, p, 8, None).unwrap(), single);
    }
}

#[test]
fn decoding_stops_after_the_stop_token() {
    let m = model(12, 32, 5);
    let free = greedy_decode(&m, &[0, 4], 10, None).unwrap();
    let stop = free[2];
    let cut = greedy_decode(&m, &[0, 4], 10, Some(stop)).unwrap();
    let first = free.iter().position(|&t| t == stop).unwrap();
    assert_eq!(cut, free[..=first].to_vec());
}

#[test]
fn untrained_model_scores_near_zero() {
    let cfg = PathStarConfig::new(2, 5);
    let spec = TaskSpec::PathStar(cfg.clone());
    let (_, test) = generate_splits(&spec, 1, 100, 11).unwrap();
    let m = model(spec.vocab_size(), cfg.seq_len(), 1);
    let em = path_exact_match(&m, &test.instances).unwrap();
    assert!((0.0..=0.05).contains(&em), "em {em}");

    let sib = SiblingConfig::new(2, 10);
    let m = model(sib.vocab_size(), sib.seq_len(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = sibling_coherence(&m, &sib, 100, 1.0, &mut rng).unwrap();
    assert!((0.0..=0.05).contains(&c), "coherence {c}");
    assert!(sibling_coherence(&m, &sib, 0, 1.0, &mut rng).is_err());
}

#[test]
fn convergence_ratio_cases() {
    assert_eq!(
        convergence_ratio(Some(40), Some(40)),
        ConvergenceRatio::Ratio(1.0)
    );
    assert_eq!(convergence_ratio(Some(30), Some(60)).value(), Some(0.5));
    assert_eq!(
        convergence_ratio(None, Some(60)),
        ConvergenceRatio::MethodDidNotConverge
    );
    assert_eq!(
        convergence_ratio(Some(10), None),
        ConvergenceRatio::BaselineDidNotConverge
    );
}

#[test]
fn mean_and_standard_error_match_hand_values() {
    assert_eq!(mean_se(&[]), None);
    assert_eq!(mean_se(&[2.5]), Some((2.5, 0.0)));
    let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((m - 2.5).abs() < 1e-15);
    let oracle = ((1.5f64.powi(2) * 2.0 + 0.5f64.powi(2) * 2.0) / 3.0 / 4.0).sqrt();
    assert!((se - oracle).abs() < 1e-15);
}

#[test]
fn report_renders_every_cell() {
    let mut r = EvalReport::default();
    r.add("ntp", "path-star", "em", vec![0.5, 0.6], 0);
    r.add("fsp-bce", "path-star", "em", vec![1.0], 1);
    let table = r.table("em");
    assert!(table.contains("ntp") && table.contains("fsp-bce"));
    let csv = r.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(r.to_json().unwrap().contains("fsp-bce"));
}
