use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;

use fsp::tasks::dataset::{generate_splits, sequence_hash, Dataset};
use fsp::tasks::path_star::{
    decode_prefix, encode_path_star, gen_path_star, node_token, validate_path_star,
};
use fsp::tasks::sibling::{encode_sibling, gen_sibling, validate_sibling_sequence};
use fsp::tasks::{PathStarConfig, SiblingConfig, TaskSpec, BOS, EOS, EQ};

/// Degree and path length with `1 + d·l ≤ 50`.
fn graph_params() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6).prop_flat_map(|d| (Just(d), 1usize..=(49 / d).min(9)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_star_instances_are_valid_and_round_trip((d, l) in graph_params(), seed in any::<u64>()) {
        let cfg = PathStarConfig::new(d, l);
        for inst in gen_path_star(&cfg, 4, seed).unwrap() {
            prop_assert!(validate_path_star(&inst).is_ok());
            let enc = encode_path_star(&inst);
            prop_assert_eq!(enc.tokens.len(), cfg.seq_len());
            prop_assert_eq!(enc.tokens[0], BOS);
            prop_assert_eq!(enc.tokens[enc.answer_start], EQ);
            prop_assert_eq!(*enc.tokens.last().unwrap(), EOS);
            let mask = enc.loss_mask();
            prop_assert_eq!(mask.iter().filter(|&&m| m).count(), inst.path.len() + 1);
            let first = mask.iter().position(|&m| m).unwrap();
            let last = mask.iter().rposition(|&m| m).unwrap();
            prop_assert!(mask[first..=last].iter().all(|&m| m));

            let q = decode_prefix(&enc.tokens).unwrap();
            let multiset = |e: &[(u32, u32)]| {
                let mut m = BTreeMap::new();
                for &x in e {
                    *m.entry(x).or_insert(0) += 1;
                }
                m
            };
            prop_assert_eq!(multiset(&q.edges), multiset(&inst.edges));
            prop_assert_eq!((q.start, q.end), (inst.start, inst.end));
        }
    }

    #[test]
    fn only_the_first_step_needs_lookahead((d, l) in graph_params(), seed in any::<u64>()) {
        let cfg = PathStarConfig::new(d, l);
        for inst in gen_path_star(&cfg, 2, seed).unwrap() {
            let enc = encode_path_star(&inst);
            let q = decode_prefix(&enc.tokens).unwrap();
            let succ = |u: u32| q.edges.iter().filter(|e| e.0 == u).map(|e| e.1).collect::<Vec<_>>();
            prop_assert_eq!(succ(q.start).len(), d);
            prop_assert!(succ(q.end).is_empty());
            let path = &inst.path;
            for w in path[1..].windows(2) {
                prop_assert_eq!(succ(w[0]), vec![w[1]]);
            }
            let answer = enc.answer();
            prop_assert_eq!(answer[0], node_token(q.start));
            prop_assert_eq!(answer.last(), Some(&EOS));
        }
    }

    #[test]
    fn sibling_children_stay_in_their_supports(k in 1usize..7, n in 1usize..40, seed in any::<u64>(), shuffle in any::<bool>()) {
        let mut cfg = SiblingConfig::new(k, n);
        cfg.shuffle_components = shuffle;
        let mut owners: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for c in 0..k {
            for slot in 0..3 {
                for i in 0..n {
                    let tok = cfg.child_token(c, slot, i);
                    prop_assert!(owners.insert(tok, (c, slot)).is_none(), "supports overlap at {}", tok);
                }
            }
            prop_assert!(!owners.contains_key(&cfg.parent_token(c)));
        }
        for inst in gen_sibling(&cfg, 4, seed).unwrap() {
            for b in &inst.blocks {
                for (slot, ch) in b.children.iter().enumerate() {
                    prop_assert_eq!(owners.get(ch), Some(&(b.component, slot)));
                }
                prop_assert_eq!(b.parent, cfg.parent_token(b.component));
            }
            let enc = encode_sibling(&cfg, &inst);
            prop_assert_eq!(enc.tokens.len(), cfg.seq_len());
            prop_assert!(enc.tokens.iter().all(|&t| (t as usize) < cfg.vocab_size()));
            prop_assert!(validate_sibling_sequence(&enc.tokens[1..], &cfg).is_ok());
            let mask = enc.loss_mask();
            prop_assert!(mask[..mask.len() - 1].iter().all(|&m| m));
            prop_assert!(!mask[mask.len() - 1]);
        }
    }

    #[test]
    fn splits_are_disjoint_and_reproducible(seed in 0u64..1000, sibling in any::<bool>()) {
        let spec = if sibling {
            TaskSpec::Sibling(SiblingConfig::new(2, 3))
        } else {
            TaskSpec::PathStar(PathStarConfig::new(2, 3))
        };
        let (train, test) = generate_splits(&spec, 60, 20, seed).unwrap();
        let (train2, test2) = generate_splits(&spec, 60, 20, seed).unwrap();
        prop_assert_eq!(&train, &train2);
        prop_assert_eq!(&test, &test2);
        let hashes: HashSet<[u8; 32]> = train.instances.iter().map(|i| sequence_hash(&i.tokens)).collect();
        prop_assert_eq!(hashes.len(), 60);
        prop_assert!(test.instances.iter().all(|i| !hashes.contains(&sequence_hash(&i.tokens))));
    }

    #[test]
    fn dataset_binary_and_jsonl_round_trip(seed in 0u64..1000) {
        let spec = TaskSpec::PathStar(PathStarConfig::new(2, 4));
        let (train, _) = generate_splits(&spec, 12, 1, seed).unwrap();
        let mut bin = Vec::new();
        train.write_bin(&mut bin).unwrap();
        prop_assert_eq!(Dataset::read_bin(&mut bin.as_slice()).unwrap(), train.clone());
        let mut jsonl = Vec::new();
        train.write_jsonl(&mut jsonl).unwrap();
        prop_assert_eq!(Dataset::read_jsonl(jsonl.as_slice(), train.vocab_size).unwrap(), train);
    }
}

#[test]
fn large_sibling_generation_validates() {
    let cfg = SiblingConfig::new(4, 100);
    let all = gen_sibling(&cfg, 2000, 7).unwrap();
    assert!(all.iter().all(|inst| validate_sibling_sequence(
        &encode_sibling(&cfg, inst).tokens[1..],
        &cfg
    )
    .is_ok()));
}
