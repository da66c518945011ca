//! Path-star graphs `G(d, l)`: `d` node-disjoint arms of `l` nodes hanging off
//! a shared start node. The model sees the shuffled edge list, the start and
//! end nodes, and must emit the arm that leads to the end node.
//!
//! Encoding:
//! `BOS (u v)×(d·l) SEP start end EQ start p1 … pl EOS`.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::TaskInstance;
use super::{BOS, EOS, EQ, N_SPECIAL, SEP};
use crate::error::{invalid, Result};
use crate::tasks::dataset::instance_rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStarConfig {
    /// Number of arms.
    pub degree: usize,
    /// Nodes per arm, excluding the start node.
    pub path_len: usize,
    /// Size of the node universe nodes are drawn from.
    pub n_nodes: usize,
}

impl PathStarConfig {
    pub fn new(degree: usize, path_len: usize) -> Self {
        Self {
            degree,
            path_len,
            n_nodes: 50,
        }
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL as usize + self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.degree * self.path_len
    }

    /// Start node plus `path_len` nodes.
    pub fn target_len(&self) -> usize {
        self.path_len + 1
    }

    /// Index of the `EQ` token in every encoded sequence.
    pub fn eq_position(&self) -> usize {
        1 + 2 * self.n_edges() + 3
    }

    pub fn seq_len(&self) -> usize {
        self.eq_position() + 1 + self.target_len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 || self.path_len < 1 {
            return invalid("path-star needs degree >= 1 and path length >= 1");
        }
        let need = 1 + self.degree * self.path_len;
        if need > self.n_nodes {
            return invalid(format!(
                "G({}, {}) needs {need} nodes but the universe has {}",
                self.degree, self.path_len, self.n_nodes
            ));
        }
        if self.vocab_size() > u16::MAX as usize + 1 {
            return invalid("node universe does not fit 16-bit token ids");
        }
        Ok(())
    }
}

/// One graph; nodes are `0..n_nodes`, not token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStarInstance {
    pub degree: usize,
    pub path_len: usize,
    pub n_nodes: usize,
    /// Directed edges pointing away from the start node, in prefix order.
    pub edges: Vec<(u32, u32)>,
    pub start: u32,
    pub end: u32,
    /// `start, p1, …, pl` with `pl == end`.
    pub path: Vec<u32>,
}

pub fn node_token(node: u32) -> u32 {
    node + N_SPECIAL
}

pub fn token_node(token: u32) -> Option<u32> {
    token.checked_sub(N_SPECIAL)
}

fn generate_one(cfg: &PathStarConfig, rng: &mut ChaCha8Rng) -> PathStarInstance {
    let (d, l) = (cfg.degree, cfg.path_len);
    let nodes: Vec<u32> = index::sample(rng, cfg.n_nodes, 1 + d * l)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    let start = nodes[0];
    let arms: Vec<&[u32]> = nodes[1..].chunks(l).collect();
    let mut edges = Vec::with_capacity(d * l);
    for arm in &arms {
        let mut prev = start;
        for &v in *arm {
            edges.push((prev, v));
            prev = v;
        }
    }
    edges.shuffle(rng);
    let target = rng.random_range(0..d);
    let mut path = vec![start];
    path.extend_from_slice(arms[target]);
    PathStarInstance {
        degree: d,
        path_len: l,
        n_nodes: cfg.n_nodes,
        edges,
        start,
        end: *path.last().unwrap(),
        path,
    }
}

/// `n` graphs, instance `i` drawn from its own stream of `seed`.
pub fn gen_path_star(cfg: &PathStarConfig, n: usize, seed: u64) -> Result<Vec<PathStarInstance>> {
    cfg.validate()?;
    if n == 0 {
        return invalid("need at least one instance");
    }
    Ok((0..n).map(|i| instance_at(cfg, seed, i as u64)).collect())
}

/// Instance `index` of the stream for `seed`; `cfg` must be valid.
pub fn instance_at(cfg: &PathStarConfig, seed: u64, index: u64) -> PathStarInstance {
    generate_one(cfg, &mut instance_rng(seed, index))
}

/// Checks the graph invariants from the edge list alone.
pub fn validate_path_star(inst: &PathStarInstance) -> Result<()> {
    let (d, l) = (inst.degree, inst.path_len);
    if inst.edges.len() != d * l {
        return invalid(format!(
            "expected {} edges, found {}",
            d * l,
            inst.edges.len()
        ));
    }
    let mut out_deg = vec![0usize; inst.n_nodes];
    let mut in_deg = vec![0usize; inst.n_nodes];
    for &(u, v) in &inst.edges {
        if u as usize >= inst.n_nodes || v as usize >= inst.n_nodes {
            return invalid(format!("edge ({u}, {v}) leaves the node universe"));
        }
        out_deg[u as usize] += 1;
        in_deg[v as usize] += 1;
    }
    if out_deg[inst.start as usize] != d || in_deg[inst.start as usize] != 0 {
        return invalid("start node must have exactly d outgoing and no incoming edges");
    }
    // Walk each arm from the start; arms must be simple, of length l, and disjoint.
    let mut seen = vec![false; inst.n_nodes];
    seen[inst.start as usize] = true;
    let mut terminals = Vec::new();
    for &(_, first) in inst.edges.iter().filter(|e| e.0 == inst.start) {
        let mut node = first;
        for step in 1..=l {
            if seen[node as usize] {
                return invalid(format!("node {node} is shared between arms"));
            }
            seen[node as usize] = true;
            if in_deg[node as usize] != 1 {
                return invalid(format!(
                    "node {node} has in-degree {}",
                    in_deg[node as usize]
                ));
            }
            let next: Vec<u32> = inst
                .edges
                .iter()
                .filter(|e| e.0 == node)
                .map(|e| e.1)
                .collect();
            if step == l {
                if !next.is_empty() {
                    return invalid(format!("arm continues past length {l}"));
                }
                terminals.push(node);
            } else {
                if next.len() != 1 {
                    return invalid(format!("node {node} has out-degree {}", next.len()));
                }
                node = next[0];
            }
        }
    }
    if terminals.len() != d {
        return invalid(format!("expected {d} arms, found {}", terminals.len()));
    }
    if terminals.iter().filter(|&&t| t == inst.end).count() != 1 {
        return invalid("end node is not the terminal of exactly one arm");
    }
    if inst.path.len() != l + 1
        || inst.path[0] != inst.start
        || *inst.path.last().unwrap() != inst.end
    {
        return invalid("target path has the wrong length or endpoints");
    }
    for w in inst.path.windows(2) {
        if !inst.edges.contains(&(w[0], w[1])) {
            return invalid(format!(
                "target path step {} -> {} is not an edge",
                w[0], w[1]
            ));
        }
    }
    Ok(())
}

/// Token sequence with next-token supervision on positions `EQ ..= pl`, so
/// every path token and the closing `EOS` are predicted.
pub fn encode_path_star(inst: &PathStarInstance) -> TaskInstance {
    let mut tokens = Vec::with_capacity(2 * inst.edges.len() + inst.path.len() + 6);
    tokens.push(BOS);
    for &(u, v) in &inst.edges {
        tokens.push(node_token(u));
        tokens.push(node_token(v));
    }
    tokens.extend([SEP, node_token(inst.start), node_token(inst.end), EQ]);
    let answer_start = tokens.len() - 1;
    tokens.extend(inst.path.iter().map(|&n| node_token(n)));
    let answer_end = tokens.len();
    tokens.push(EOS);
    TaskInstance {
        tokens,
        answer_start,
        answer_end,
    }
}

/// What the model sees before it starts answering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathStarQuery {
    pub edges: Vec<(u32, u32)>,
    pub start: u32,
    pub end: u32,
}

/// Parses `BOS edges SEP start end EQ` back into a query.
pub fn decode_prefix(tokens: &[u32]) -> Result<PathStarQuery> {
    let Some(eq) = tokens.iter().position(|&t| t == EQ) else {
        return invalid("prefix has no EQ token");
    };
    if tokens.first() != Some(&BOS) || eq < 4 || tokens[eq - 3] != SEP {
        return invalid("prefix is not BOS … SEP start end EQ");
    }
    let body = &tokens[1..eq - 3];
    if !body.len().is_multiple_of(2) {
        return invalid("edge section has an odd number of tokens");
    }
    let node = |t: u32| match token_node(t) {
        Some(n) => Ok(n),
        None => invalid(format!("special token {t} inside the prefix")),
    };
    let edges = body
        .chunks(2)
        .map(|p| Ok((node(p[0])?, node(p[1])?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathStarQuery {
        edges,
        start: node(tokens[eq - 2])?,
        end: node(tokens[eq - 1])?,
    })
}
