//! Reverse language model and the future-summary vectors it provides.
//!
//! The teacher is an ordinary next-token model trained on right-to-left
//! sequences. For forward position `t` (0-based) of a row of length `T`, the
//! summary is the teacher state at reversed position `T − t − 3`, which has
//! read exactly `x[t+2..T]`. Rows with `t + 2 ≥ T` have no summary.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::batch::TokenBatch;
use crate::error::{config_err, invalid, Error, Result};
use crate::model::Model;
use crate::objectives::{FutureSummaryTarget, SummarySource, TeacherLayer};
use crate::tasks::dataset::{sequence_hash, Dataset, TaskInstance};
use crate::tensor::{Scalar, Tape, Tensor};

/// `r[j] = x[T−1−j]`.
pub fn reverse_sequence(tokens: &[u32]) -> Vec<u32> {
    tokens.iter().rev().copied().collect()
}

/// Reversed copy of a corpus with next-token supervision on every position
/// but the last.
pub fn reversed_dataset(ds: &Dataset) -> Dataset {
    Dataset {
        vocab_size: ds.vocab_size,
        instances: ds
            .instances
            .iter()
            .map(|i| TaskInstance {
                tokens: reverse_sequence(&i.tokens),
                answer_start: 0,
                answer_end: i.tokens.len() - 1,
            })
            .collect(),
    }
}

/// Reversed position whose state summarizes `x[t+2..len]`, if any.
pub fn reversed_position(t: usize, len: usize) -> Option<usize> {
    (t + 2 < len).then(|| len - t - 3)
}

/// Summary vectors `[B, T, d]` for a forward batch, with validity per row.
pub fn extract_summaries<F: Scalar>(
    teacher: &Model<F>,
    tokens: &TokenBatch,
    layer: TeacherLayer,
) -> Result<FutureSummaryTarget<F>> {
    let n_layers = teacher.config().n_layers;
    if let TeacherLayer::Depth(k) = layer {
        if k == 0 || k > n_layers {
            return config_err(format!("teacher layer depth-{k} outside 1..={n_layers}"));
        }
    }
    let rev = tokens.reversed();
    let mut tape = Tape::new();
    let p = teacher.bind(&mut tape, false);
    let layers = teacher.forward_layers(&mut tape, &p, &rev)?;
    let h = match layer {
        TeacherLayer::Last => {
            teacher.head(&mut tape, &p, *layers.last().expect("at least one layer"))?
        }
        TeacherLayer::Depth(k) => layers[k - 1],
    };
    let src = tape.value(h).data();
    let d = teacher.config().d_model;
    let (b_n, t_n) = (tokens.batch, tokens.len);
    let mut out = vec![F::zero(); b_n * t_n * d];
    let mut valid = vec![false; b_n * t_n];
    for b in 0..b_n {
        let len = tokens.lengths[b];
        for t in 0..len {
            if let Some(j) = reversed_position(t, len) {
                let dst = (b * t_n + t) * d;
                let from = (b * t_n + j) * d;
                out[dst..dst + d].copy_from_slice(&src[from..from + d]);
                valid[b * t_n + t] = true;
            }
        }
    }
    Ok(FutureSummaryTarget::Vectors {
        values: Tensor::new(vec![b_n, t_n, d], out)?,
        valid,
    })
}

pub const CACHE_MAGIC: &[u8; 8] = b"FSPSUMC1";

/// Summaries keyed by sequence hash, bound to one teacher checkpoint and
/// layer.
///
/// File layout, little-endian:
///
/// ```text
/// magic 8 bytes "FSPSUMC1"
/// checkpoint sha256 32 bytes, layer u32 (0 = last, k = depth-k)
/// width u32, count u32
/// per sequence:
///   sequence sha256 32 bytes, len u32, rows u32, f32 × rows × width
/// ```
///
/// `rows` is `len − 2` (or 0): the valid positions, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryCache {
    pub checkpoint_hash: [u8; 32],
    pub layer: TeacherLayer,
    pub width: usize,
    entries: HashMap<[u8; 32], (usize, Vec<f32>)>,
}

fn layer_code(l: TeacherLayer) -> u32 {
    match l {
        TeacherLayer::Last => 0,
        TeacherLayer::Depth(k) => k as u32,
    }
}

fn read_arr<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated summary cache: {e}")))?;
    Ok(b)
}

impl SummaryCache {
    pub fn new(checkpoint_hash: [u8; 32], layer: TeacherLayer, width: usize) -> Self {
        Self {
            checkpoint_hash,
            layer,
            width,
            entries: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, tokens: &[u32]) -> Option<&[f32]> {
        self.entries
            .get(&sequence_hash(tokens))
            .filter(|(len, _)| *len == tokens.len())
            .map(|(_, v)| v.as_slice())
    }

    pub fn insert(&mut self, tokens: &[u32], rows: Vec<f32>) -> Result<()> {
        let n = tokens.len().saturating_sub(2);
        if rows.len() != n * self.width {
            return invalid(format!(
                "expected {} summary values, got {}",
                n * self.width,
                rows.len()
            ));
        }
        self.entries
            .insert(sequence_hash(tokens), (tokens.len(), rows));
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&self.checkpoint_hash)?;
        w.write_all(&layer_code(self.layer).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        for k in keys {
            let (len, rows) = &self.entries[k];
            w.write_all(k)?;
            w.write_all(&(*len as u32).to_le_bytes())?;
            w.write_all(&((rows.len() / self.width.max(1)) as u32).to_le_bytes())?;
            for v in rows {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        if &read_arr::<_, 8>(r)? != CACHE_MAGIC {
            return Err(Error::Format("bad summary cache magic".into()));
        }
        let checkpoint_hash = read_arr::<_, 32>(r)?;
        let layer = match u32::from_le_bytes(read_arr(r)?) {
            0 => TeacherLayer::Last,
            k => TeacherLayer::Depth(k as usize),
        };
        let width = u32::from_le_bytes(read_arr(r)?) as usize;
        let count = u32::from_le_bytes(read_arr(r)?) as usize;
        let mut cache = Self::new(checkpoint_hash, layer, width);
        for _ in 0..count {
            let key = read_arr::<_, 32>(r)?;
            let len = u32::from_le_bytes(read_arr(r)?) as usize;
            let rows = u32::from_le_bytes(read_arr(r)?) as usize;
            if rows != len.saturating_sub(2) {
                return Err(Error::Format(format!(
                    "entry of length {len} holds {rows} rows"
                )));
            }
            let mut raw = vec![0u8; rows * width * 4];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Format(format!("truncated summary cache: {e}")))?;
            let vals = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cache.entries.insert(key, (len, vals));
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads `path`, or starts empty if it does not exist. A cache built for
    /// another checkpoint, layer or width is rejected.
    pub fn open(
        path: &Path,
        checkpoint_hash: [u8; 32],
        layer: TeacherLayer,
        width: usize,
    ) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new(checkpoint_hash, layer, width));
        }
        let c = Self::read(&mut BufReader::new(File::open(path)?))?;
        if c.checkpoint_hash != checkpoint_hash || c.layer != layer || c.width != width {
            return Err(Error::Format(format!(
                "summary cache {} was built for a different teacher or layer",
                path.display()
            )));
        }
        Ok(c)
    }
}

/// Frozen teacher serving summaries for student batches, with an optional
/// cache.
pub struct TeacherSummaries<F> {
    teacher: Model<F>,
    layer: TeacherLayer,
    cache: Option<SummaryCache>,
    cache_path: Option<PathBuf>,
    initial_hash: String,
}

impl<F: Scalar> TeacherSummaries<F> {
    pub fn new(teacher: Model<F>, layer: TeacherLayer) -> Result<Self> {
        if let TeacherLayer::Depth(k) = layer {
            if k == 0 || k > teacher.config().n_layers {
                return config_err(format!(
                    "teacher layer depth-{k} outside 1..={}",
                    teacher.config().n_layers
                ));
            }
        }
        let initial_hash = teacher.param_hash();
        Ok(Self {
            teacher,
            layer,
            cache: None,
            cache_path: None,
            initial_hash,
        })
    }

    /// Keeps summaries in memory and persists them to `path` on
    /// [`TeacherSummaries::flush`].
    pub fn with_cache(mut self, path: Option<&Path>, checkpoint_hash: [u8; 32]) -> Result<Self> {
        let width = self.teacher.config().d_model;
        self.cache = Some(match path {
            Some(p) => SummaryCache::open(p, checkpoint_hash, self.layer, width)?,
            None => SummaryCache::new(checkpoint_hash, self.layer, width),
        });
        self.cache_path = path.map(Path::to_path_buf);
        Ok(self)
    }

    pub fn teacher(&self) -> &Model<F> {
        &self.teacher
    }

    /// Parameter hash taken when the teacher was handed over.
    pub fn initial_hash(&self) -> &str {
        &self.initial_hash
    }

    /// Errors if the teacher's parameters differ from when it was frozen.
    pub fn verify_frozen(&self) -> Result<()> {
        if self.teacher.param_hash() != self.initial_hash {
            return invalid("teacher parameters changed during student training");
        }
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        if let (Some(c), Some(p)) = (&self.cache, &self.cache_path) {
            c.save(p)?;
        }
        Ok(())
    }
}

impl<F: Scalar> SummarySource<F> for TeacherSummaries<F> {
    fn width(&self) -> usize {
        self.teacher.config().d_model
    }

    fn summaries(&mut self, tokens: &TokenBatch) -> Result<FutureSummaryTarget<F>> {
        let Some(cache) = self.cache.as_mut() else {
            return extract_summaries(&self.teacher, tokens, self.layer);
        };
        let d = self.teacher.config().d_model;
        let misses: Vec<usize> = (0..tokens.batch)
            .filter(|&b| cache.get(tokens.row(b)).is_none())
            .collect();
        if !misses.is_empty() {
            let rows: Vec<&[u32]> = misses.iter().map(|&b| tokens.row(b)).collect();
            let sub = TokenBatch::from_rows(&rows, 0)?;
            let FutureSummaryTarget::Vectors { values, .. } =
                extract_summaries(&self.teacher, &sub, self.layer)?
            else {
                unreachable!("extraction yields vectors");
            };
            for (i, &b) in misses.iter().enumerate() {
                let n = tokens.lengths[b].saturating_sub(2);
                let start = i * sub.len * d;
                let vals = values.data()[start..start + n * d]
                    .iter()
                    .map(|v| v.as_f64() as f32)
                    .collect();
                cache.insert(tokens.row(b), vals)?;
            }
        }
        let (b_n, t_n) = (tokens.batch, tokens.len);
        let mut out = vec![F::zero(); b_n * t_n * d];
        let mut valid = vec![false; b_n * t_n];
        for b in 0..b_n {
            let rows = cache.get(tokens.row(b)).expect("filled above");
            for (t, chunk) in rows.chunks(d).enumerate() {
                let dst = (b * t_n + t) * d;
                for (o, &v) in out[dst..dst + d].iter_mut().zip(chunk) {
                    *o = F::from_f64(v as f64);
                }
                valid[b * t_n + t] = true;
            }
        }
        Ok(FutureSummaryTarget::Vectors {
            values: Tensor::new(vec![b_n, t_n, d], out)?,
            valid,
        })
    }
}
