//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "GFCKPT1\0"
//! count   u64      number of entries
//! entry*  name_len u32, name UTF-8 bytes,
//!         dtype u8 (1 = f32, 2 = f64, 3 = u8), rank u8,
//!         extents u64 x rank, payload numel x dtype size
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GFCKPT1\0";

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Entry {
    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
            Entry::U8 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Entry::F32(_) => DType::F32,
            Entry::F64(_) => DType::F64,
            Entry::U8 { .. } => DType::U8,
        }
    }

    /// Converts a floating entry to the requested precision.
    pub fn to_tensor<E: Element>(&self) -> Option<Tensor<E>> {
        match self {
            Entry::F32(t) => Some(t.cast()),
            Entry::F64(t) => Some(t.cast()),
            Entry::U8 { .. } => None,
        }
    }

    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Self {
        match E::DTYPE {
            DType::F64 => Entry::F64(t.cast()),
            _ => Entry::F32(t.cast()),
        }
    }
}

/// Ordered list of named entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Entry)>,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.push((name.into(), entry));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        let mut buf = Vec::new();
        for (name, entry) in &self.entries {
            let shape = entry.shape();
            if shape.len() > u8::MAX as usize {
                return corrupt(format!("rank {} of '{}' exceeds 255", shape.len(), name));
            }
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[entry.dtype() as u8, shape.len() as u8])?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            buf.clear();
            match entry {
                Entry::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut buf)),
                Entry::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut buf)),
                Entry::U8 { data, .. } => buf.extend_from_slice(data),
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return corrupt("bad magic");
        }
        let count = read_u64(r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
            let mut head = [0u8; 2];
            r.read_exact(&mut head)?;
            let Some(dtype) = DType::from_code(head[0]) else {
                return corrupt(format!("unknown dtype code {} for '{}'", head[0], name));
            };
            let mut shape = Vec::with_capacity(head[1] as usize);
            for _ in 0..head[1] {
                shape.push(read_u64(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut payload = vec![0u8; numel * dtype.size()];
            r.read_exact(&mut payload)?;
            let entry = match dtype {
                DType::F32 => Entry::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => Entry::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
                DType::U8 => Entry::U8 { shape, data: payload },
            };
            entries.push((name, entry));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
