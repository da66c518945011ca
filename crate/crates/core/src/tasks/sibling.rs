//! Multi-component sibling discovery.
//!
//! A sequence is `BOS` followed by `K` blocks of four tokens: three children
//! then their parent. Component `c` owns three child slots, each with its own
//! support of `N` tokens, and one parent token. All supports are disjoint, so
//! any child identifies its component and slot.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{instance_rng, TaskInstance};
use super::{BOS, N_SPECIAL};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiblingConfig {
    /// Number of components `K`.
    pub components: usize,
    /// Support size `N` of each child slot.
    pub support: usize,
    /// Shuffle block order per instance instead of the canonical order.
    #[serde(default)]
    pub shuffle_components: bool,
}

impl SiblingConfig {
    pub fn new(components: usize, support: usize) -> Self {
        Self {
            components,
            support,
            shuffle_components: false,
        }
    }

    fn stride(&self) -> usize {
        3 * self.support + 1
    }

    pub fn task_tokens(&self) -> usize {
        self.components * self.stride()
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL as usize + self.task_tokens()
    }

    /// `BOS` plus four tokens per component.
    pub fn seq_len(&self) -> usize {
        1 + 4 * self.components
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.support == 0 {
            return invalid("sibling task needs K >= 1 and N >= 1");
        }
        if self.vocab_size() > u16::MAX as usize + 1 {
            return invalid(format!(
                "K={} N={} needs {} tokens, more than 16-bit ids allow",
                self.components,
                self.support,
                self.vocab_size()
            ));
        }
        Ok(())
    }

    pub fn child_token(&self, component: usize, slot: usize, index: usize) -> u32 {
        (N_SPECIAL as usize + component * self.stride() + slot * self.support + index) as u32
    }

    pub fn parent_token(&self, component: usize) -> u32 {
        (N_SPECIAL as usize + component * self.stride() + 3 * self.support) as u32
    }

    /// `(component, slot)` of a child token, or `None` for anything else.
    pub fn classify_child(&self, token: u32) -> Option<(usize, usize)> {
        let off = (token as usize).checked_sub(N_SPECIAL as usize)?;
        let (component, within) = (off / self.stride(), off % self.stride());
        if component >= self.components || within >= 3 * self.support {
            return None;
        }
        Some((component, within / self.support))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiblingBlock {
    pub component: usize,
    /// Child tokens in slot order.
    pub children: [u32; 3],
    pub parent: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiblingInstance {
    pub blocks: Vec<SiblingBlock>,
}

/// `n` instances, instance `i` drawn from its own stream of `seed`.
pub fn gen_sibling(cfg: &SiblingConfig, n: usize, seed: u64) -> Result<Vec<SiblingInstance>> {
    cfg.validate()?;
    if n == 0 {
        return invalid("need at least one instance");
    }
    Ok((0..n).map(|i| instance_at(cfg, seed, i as u64)).collect())
}

/// Instance `index` of the stream for `seed`; `cfg` must be valid.
pub fn instance_at(cfg: &SiblingConfig, seed: u64, index: u64) -> SiblingInstance {
    let mut rng = instance_rng(seed, index);
    let mut order: Vec<usize> = (0..cfg.components).collect();
    if cfg.shuffle_components {
        order.shuffle(&mut rng);
    }
    let blocks = order
        .into_iter()
        .map(|c| SiblingBlock {
            component: c,
            children: std::array::from_fn(|s| {
                cfg.child_token(c, s, rng.random_range(0..cfg.support))
            }),
            parent: cfg.parent_token(c),
        })
        .collect();
    SiblingInstance { blocks }
}

/// Every position but the last is supervised.
pub fn encode_sibling(cfg: &SiblingConfig, inst: &SiblingInstance) -> TaskInstance {
    let mut tokens = Vec::with_capacity(cfg.seq_len());
    tokens.push(BOS);
    for b in &inst.blocks {
        tokens.extend_from_slice(&b.children);
        tokens.push(b.parent);
    }
    let answer_end = tokens.len() - 1;
    TaskInstance {
        tokens,
        answer_start: 0,
        answer_end,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// The sequence ends inside this block or runs past the last block.
    Length { expected: usize, found: usize },
    /// Child in `slot` is not in that slot's support of the block's component.
    ChildOutOfSupport { slot: usize },
    /// Token in the parent position is not the component's parent.
    WrongParent,
    /// Component does not match the canonical order, or repeats.
    WrongComponent,
}

/// First problem found, with the 0-based block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub block: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {}: ", self.block + 1)?;
        match self.kind {
            ViolationKind::Length { expected, found } => {
                write!(f, "expected {expected} tokens, found {found}")
            }
            ViolationKind::ChildOutOfSupport { slot } => {
                write!(f, "child {} outside its support", slot + 1)
            }
            ViolationKind::WrongParent => write!(f, "parent does not match the children"),
            ViolationKind::WrongComponent => write!(f, "component out of order or repeated"),
        }
    }
}

/// Checks a generated body (the tokens after `BOS`) block by block.
pub fn validate_sibling_sequence(tokens: &[u32], cfg: &SiblingConfig) -> Result<(), Violation> {
    let expected = 4 * cfg.components;
    let mut used = vec![false; cfg.components];
    for (b, block) in tokens.chunks(4).enumerate() {
        if b >= cfg.components || block.len() < 4 {
            return Err(Violation {
                block: b.min(cfg.components.saturating_sub(1)),
                kind: ViolationKind::Length {
                    expected,
                    found: tokens.len(),
                },
            });
        }
        let component = match cfg.classify_child(block[0]) {
            Some((c, 0)) => c,
            _ => {
                return Err(Violation {
                    block: b,
                    kind: ViolationKind::ChildOutOfSupport { slot: 0 },
                })
            }
        };
        let in_order = if cfg.shuffle_components {
            !used[component]
        } else {
            component == b
        };
        if !in_order {
            return Err(Violation {
                block: b,
                kind: ViolationKind::WrongComponent,
            });
        }
        used[component] = true;
        for slot in 1..3 {
            if cfg.classify_child(block[slot]) != Some((component, slot)) {
                return Err(Violation {
                    block: b,
                    kind: ViolationKind::ChildOutOfSupport { slot },
                });
            }
        }
        if block[3] != cfg.parent_token(component) {
            return Err(Violation {
                block: b,
                kind: ViolationKind::WrongParent,
            });
        }
    }
    if tokens.len() != expected {
        return Err(Violation {
            block: (tokens.len() / 4).min(cfg.components.saturating_sub(1)),
            kind: ViolationKind::Length {
                expected,
                found: tokens.len(),
            },
        });
    }
    Ok(())
}
