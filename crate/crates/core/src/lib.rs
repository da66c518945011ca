//! Future-aware pretraining laboratory.
//!
//! Next-token prediction plus five auxiliary objectives that look past the
//! next token (multi-token heads, injected multi-token heads, random skip
//! targets, bag-of-future-tokens BCE and reverse-LM summary matching), a
//! small causal transformer to train them on, and the synthetic path-star
//! and sibling-discovery tasks used to compare them.

pub mod batch;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod tasks;
pub mod teacher;
pub mod tensor;
pub mod training;

pub use batch::TokenBatch;
pub use error::{Error, Result};
pub use model::{AuxHeadKind, Model, ModelConfig};
