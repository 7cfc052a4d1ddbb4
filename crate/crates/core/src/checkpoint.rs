//! Versioned binary checkpoints.
//!
//! Layout: magic bytes, format version, element dtype, embedding width, the
//! exact run-config JSON that produced the parameters, then every parameter
//! in registry order as `(name, shape, little-endian data)`. Loading returns
//! parameters bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 8] = b"FEWFUSE\0";
const VERSION: u32 = 1;

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    config_json: &str,
    embedding_dim: usize,
    params: &[(String, Tensor<S>)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(S::DTYPE.byte());
    buf.extend_from_slice(&(embedding_dim as u32).to_le_bytes());
    let config_bytes = config_json.as_bytes();
    buf.extend_from_slice(&(config_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in tensor.data().iter() {
            v.write_le(&mut buf);
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Data("checkpoint truncated".to_string()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Checkpoint header: the embedded config JSON, dtype, and embedding width.
pub struct CheckpointHeader {
    pub config_json: String,
    pub dtype: Dtype,
    pub embedding_dim: usize,
}

fn open(path: &Path) -> Result<Reader> {
    let mut data = Vec::new();
    BufReader::new(File::open(path).map_err(|e| {
        Error::Data(format!("cannot open checkpoint {}: {e}", path.display()))
    })?)
    .read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic bytes)".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    Ok(r)
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = open(path)?;
    let dtype = Dtype::from_byte(r.take(1)?[0])
        .ok_or_else(|| Error::Data("unknown checkpoint dtype".to_string()))?;
    let embedding_dim = r.u32()? as usize;
    let len = r.u64()? as usize;
    let config_json = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::Data("checkpoint config is not utf-8".to_string()))?;
    Ok(CheckpointHeader { config_json, dtype, embedding_dim })
}

/// Load parameter values into an existing registry (built from the embedded
/// config). Names, order, and shapes must match exactly.
pub fn load_into<S: Scalar>(path: &Path, params: &[(String, Tensor<S>)]) -> Result<()> {
    let mut r = open(path)?;
    let dtype = Dtype::from_byte(r.take(1)?[0])
        .ok_or_else(|| Error::Data("unknown checkpoint dtype".to_string()))?;
    if dtype != S::DTYPE {
        return Err(Error::Data(format!(
            "checkpoint dtype {dtype:?} does not match requested {:?}",
            S::DTYPE
        )));
    }
    let _d = r.u32()?;
    let config_len = r.u64()? as usize;
    r.take(config_len)?;
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {count} parameters, model expects {}",
            params.len()
        )));
    }
    for (name, tensor) in params {
        let name_len = r.u16()? as usize;
        let stored_name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("parameter name is not utf-8".to_string()))?;
        if &stored_name != name {
            return Err(Error::Data(format!(
                "parameter order mismatch: checkpoint has '{stored_name}', model expects '{name}'"
            )));
        }
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != tensor.shape() {
            return Err(Error::Data(format!(
                "parameter '{name}' shape {shape:?} does not match model {:?}",
                tensor.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * S::WIDTH)?;
        let values: Vec<S> = raw.chunks_exact(S::WIDTH).map(S::read_le).collect();
        tensor.set_data(&values);
    }
    Ok(())
}
