use crate::error::{invalid, Result};

/// A right-padded `[batch, len]` block of token ids.
///
/// `lengths[b]` is the real length of row `b`; positions at or beyond it are
/// padding and never contribute to a loss or a future-window target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Packs sequences into a batch padded with `pad` up to the longest one.
    pub fn from_rows<S: AsRef<[u32]>>(rows: &[S], pad: u32) -> Result<Self> {
        if rows.is_empty() {
            return invalid("a batch needs at least one sequence");
        }
        let len = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        if len == 0 {
            return invalid("a batch needs at least one token");
        }
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut lengths = Vec::with_capacity(rows.len());
        for r in rows {
            let r = r.as_ref();
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(pad, len - r.len()));
            lengths.push(r.len());
        }
        Ok(Self {
            batch: rows.len(),
            len,
            ids,
            lengths,
        })
    }

    /// Single row without padding.
    pub fn single(tokens: &[u32]) -> Result<Self> {
        Self::from_rows(&[tokens], 0)
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..b * self.len + self.lengths[b]]
    }

    pub fn get(&self, b: usize, t: usize) -> u32 {
        self.ids[b * self.len + t]
    }

    pub fn numel(&self) -> usize {
        self.ids.len()
    }

    /// Tokens shifted left by `offset` within each row: entry `(b, t)` holds
    /// `x[b, t + offset]`, or `fill` where that position lies past the row.
    pub fn shifted(&self, offset: usize, fill: u32) -> Vec<u32> {
        let mut out = vec![fill; self.numel()];
        for b in 0..self.batch {
            for t in 0..self.len {
                if t + offset < self.lengths[b] {
                    out[b * self.len + t] = self.get(b, t + offset);
                }
            }
        }
        out
    }

    /// Rows reversed within their real length, padding kept at the end.
    pub fn reversed(&self) -> Self {
        let mut ids = self.ids.clone();
        for b in 0..self.batch {
            let row = &mut ids[b * self.len..b * self.len + self.lengths[b]];
            row.reverse();
        }
        Self {
            ids,
            ..self.clone()
        }
    }
}
