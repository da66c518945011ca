//! Synthetic tasks: path-star graphs and multi-component sibling discovery.
//!
//! Both tasks share one token space: four specials followed by task tokens.

pub mod dataset;
pub mod path_star;
pub mod sibling;

use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, DatasetManifest, TaskInstance};
pub use path_star::{PathStarConfig, PathStarInstance};
pub use sibling::{SiblingConfig, SiblingInstance, Violation, ViolationKind};

use crate::error::Result;

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
pub const EQ: u32 = 2;
pub const EOS: u32 = 3;
/// Number of special tokens; task tokens start at this id.
pub const N_SPECIAL: u32 = 4;

/// Parameters of either task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum TaskSpec {
    PathStar(PathStarConfig),
    Sibling(SiblingConfig),
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PathStar(_) => "path-star",
            Self::Sibling(_) => "sibling",
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::PathStar(c) => c.vocab_size(),
            Self::Sibling(c) => c.vocab_size(),
        }
    }

    /// Length of every encoded sequence.
    pub fn seq_len(&self) -> usize {
        match self {
            Self::PathStar(c) => c.seq_len(),
            Self::Sibling(c) => c.seq_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::PathStar(c) => c.validate(),
            Self::Sibling(c) => c.validate(),
        }
    }

    /// Encoded instance `index` of the stream for `seed`; `self` must be valid.
    pub fn instance(&self, seed: u64, index: u64) -> TaskInstance {
        match self {
            Self::PathStar(c) => {
                path_star::encode_path_star(&path_star::instance_at(c, seed, index))
            }
            Self::Sibling(c) => sibling::encode_sibling(c, &sibling::instance_at(c, seed, index)),
        }
    }
}
