//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "FSPCKPT1"
//! count      u32
//! per tensor:
//!   name_len u16, name (UTF-8)
//!   rank     u8,  dims u32 × rank
//!   data     f32 × product(dims), row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"FSPCKPT1";

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn write_tensors<'a, W: Write, F: Scalar>(
    w: &mut W,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<F>)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len: u16 = bytes
            .len()
            .try_into()
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read, F: Scalar>(r: &mut R) -> Result<Vec<(String, Tensor<F>)>> {
    let magic: [u8; 8] = read_exact(r)?;
    if &magic != MAGIC {
        return format_err("bad checkpoint magic");
    }
    let count = u32::from_le_bytes(read_exact(r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated tensor name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_exact::<_, 1>(r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated data for {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<F: Scalar>(model: &Model<F>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let named: Vec<_> = model.named_params().collect();
    write_tensors(&mut w, named.into_iter())?;
    w.flush()?;
    Ok(())
}

pub fn load<F: Scalar>(config: ModelConfig, path: &Path) -> Result<Model<F>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let named = read_tensors(&mut r)?;
    Model::from_named(config, named)
}

/// SHA-256 of a checkpoint file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
