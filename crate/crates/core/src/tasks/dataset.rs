//! Encoded instances, train/test splits and their on-disk forms.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! vocab_size u32, count u32
//! per instance:
//!   len u32, answer_start u32, answer_end u32, tokens u16 × len
//! ```
//!
//! Next-token supervision covers positions `answer_start..answer_end`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TaskSpec;
use crate::batch::TokenBatch;
use crate::error::{invalid, Error, Result};

/// Independent random stream for instance `index` under `seed`.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub tokens: Vec<u32>,
    pub answer_start: usize,
    pub answer_end: usize,
}

impl TaskInstance {
    /// `true` where the next token is supervised.
    pub fn loss_mask(&self) -> Vec<bool> {
        (0..self.tokens.len())
            .map(|t| (self.answer_start..self.answer_end).contains(&t))
            .collect()
    }

    /// Tokens up to and including the first supervised position.
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..=self.answer_start]
    }

    /// Supervised next tokens after the prompt, through the last one.
    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.answer_start + 1..=self.answer_end]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub vocab_size: usize,
    pub instances: Vec<TaskInstance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Packs the selected instances into a batch plus its flattened loss mask.
    pub fn batch(&self, indices: &[usize]) -> Result<(TokenBatch, Vec<bool>)> {
        let rows: Vec<&[u32]> = indices
            .iter()
            .map(|&i| self.instances[i].tokens.as_slice())
            .collect();
        let batch = TokenBatch::from_rows(&rows, 0)?;
        let mut mask = vec![false; batch.numel()];
        for (b, &i) in indices.iter().enumerate() {
            let inst = &self.instances[i];
            for t in inst.answer_start..inst.answer_end {
                mask[b * batch.len + t] = true;
            }
        }
        Ok((batch, mask))
    }

    pub fn write_bin<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        w.write_all(&(self.instances.len() as u32).to_le_bytes())?;
        for inst in &self.instances {
            for x in [inst.tokens.len(), inst.answer_start, inst.answer_end] {
                w.write_all(&(x as u32).to_le_bytes())?;
            }
            for &t in &inst.tokens {
                let t: u16 = t
                    .try_into()
                    .map_err(|_| Error::Format(format!("token {t} does not fit 16 bits")))?;
                w.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_bin<R: Read>(r: &mut R) -> Result<Self> {
        fn u32_at<R: Read>(r: &mut R) -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Format(format!("truncated dataset: {e}")))?;
            Ok(u32::from_le_bytes(b) as usize)
        }
        let vocab_size = u32_at(r)?;
        let count = u32_at(r)?;
        let mut instances = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let len = u32_at(r)?;
            let answer_start = u32_at(r)?;
            let answer_end = u32_at(r)?;
            let mut raw = vec![0u8; len * 2];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Format(format!("truncated instance {i}: {e}")))?;
            let tokens: Vec<u32> = raw
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect();
            if answer_start > answer_end || answer_end >= len.max(1) {
                return Err(Error::Format(format!("instance {i} has a bad answer span")));
            }
            if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Format(format!(
                    "instance {i} holds token {t} >= vocab {vocab_size}"
                )));
            }
            instances.push(TaskInstance {
                tokens,
                answer_start,
                answer_end,
            });
        }
        Ok(Self {
            vocab_size,
            instances,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_bin(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::read_bin(&mut BufReader::new(File::open(path)?))
    }

    /// One JSON object per line, for eyeballing.
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for inst in &self.instances {
            serde_json::to_writer(&mut *w, inst)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, vocab_size: usize) -> Result<Self> {
        let mut instances = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                instances.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self {
            vocab_size,
            instances,
        })
    }
}

/// SHA-256 over a token sequence's little-endian u32 ids.
pub fn sequence_hash(tokens: &[u32]) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    h.finalize().into()
}

/// Draws instances `0, 1, 2, …` and keeps the first `n_train + n_test`
/// distinct token sequences, so no sequence appears in both splits.
pub fn generate_splits(
    spec: &TaskSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let total = n_train + n_test;
    if n_train == 0 {
        return invalid("training split must be non-empty");
    }
    let budget = 10 * total as u64 + 1000;
    let mut seen = HashSet::with_capacity(total);
    let mut kept = Vec::with_capacity(total);
    let mut index = 0u64;
    while kept.len() < total {
        if index >= budget {
            return invalid(format!(
                "only {} distinct sequences after {budget} draws; the task space is too small",
                kept.len()
            ));
        }
        let inst = spec.instance(seed, index);
        if seen.insert(sequence_hash(&inst.tokens)) {
            kept.push(inst);
        }
        index += 1;
    }
    let test = kept.split_off(n_train);
    let v = spec.vocab_size();
    Ok((
        Dataset {
            vocab_size: v,
            instances: kept,
        },
        Dataset {
            vocab_size: v,
            instances: test,
        },
    ))
}

/// Parameter echo and content hashes written next to a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskSpec,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    /// SHA-256 over the sorted file hashes.
    pub content_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `train.bin`, `test.bin`, their `.jsonl` twins and `manifest.json`.
pub fn write_dataset_dir(
    dir: &Path,
    spec: &TaskSpec,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (name, ds) in [("train", train), ("test", test)] {
        let mut bin = Vec::new();
        ds.write_bin(&mut bin)?;
        let mut jsonl = Vec::new();
        ds.write_jsonl(&mut jsonl)?;
        for (file, bytes) in [
            (format!("{name}.bin"), bin),
            (format!("{name}.jsonl"), jsonl),
        ] {
            std::fs::write(dir.join(&file), &bytes)?;
            files.insert(file, hex::encode(Sha256::digest(&bytes)));
        }
    }
    let mut h = Sha256::new();
    for (file, hash) in &files {
        h.update(file.as_bytes());
        h.update(hash.as_bytes());
    }
    let manifest = DatasetManifest {
        task: spec.clone(),
        seed,
        n_train: train.len(),
        n_test: test.len(),
        vocab_size: spec.vocab_size(),
        seq_len: spec.seq_len(),
        files,
        content_hash: hex::encode(h.finalize()),
    };
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Reads a dataset directory written by [`write_dataset_dir`].
pub fn read_dataset_dir(dir: &Path) -> Result<(DatasetManifest, Dataset, Dataset)> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::MissingArtifact(mpath));
    }
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)?;
    let train = Dataset::load(&dir.join("train.bin"))?;
    let test = Dataset::load(&dir.join("test.bin"))?;
    Ok((manifest, train, test))
}
