//! Single-file tensor container.
//!
//! Layout: an 8-byte little-endian manifest length, the JSON manifest, then
//! the raw little-endian element data. Manifest offsets are relative to the
//! first byte after the manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const FORMAT: &str = "empt-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<ManifestEntry>,
}

/// A tensor read back from a checkpoint in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision (no-op copy when it matches).
    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }
}

pub fn write<T: Real, W: Write>(mut w: W, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
        });
        offset += (t.numel() * T::DTYPE.size_of()) as u64;
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        tensors: entries,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        buf.reserve(t.numel() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, TensorData)>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let header_len = u64::from_le_bytes(len);
    if header_len > (1 << 32) {
        return Err(TensorError::Checkpoint(format!("implausible manifest length {header_len}")));
    }
    let mut header = vec![0u8; header_len as usize];
    r.read_exact(&mut header)?;
    let manifest: Manifest =
        serde_json::from_slice(&header).map_err(|e| TensorError::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let width = entry.dtype.size_of();
        let start = entry.offset as usize;
        let end = start + numel * width;
        let bytes = payload.get(start..end).ok_or_else(|| {
            TensorError::Checkpoint(format!("tensor {} overruns the data section", entry.name))
        })?;
        let data = match entry.dtype {
            DType::F32 => TensorData::F32(decode(&entry.shape, bytes)?),
            DType::F64 => TensorData::F64(decode(&entry.shape, bytes)?),
        };
        out.push((entry.name, data));
    }
    Ok(out)
}

fn decode<T: Real>(shape: &[usize], bytes: &[u8]) -> Result<Tensor<T>> {
    let values = bytes.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
    Tensor::new(shape.to_vec(), values)
}

pub fn save<T: Real>(path: impl AsRef<Path>, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    write(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, TensorData)>> {
    read(BufReader::new(File::open(path)?))
}
