//! `P3CK` container: little-endian named blobs.
//!
//! ```text
//! "P3CK" | u32 version | u32 blob count
//! per blob: u16 name length | name | u8 dtype (0 f32, 1 f64) | u32 rank | u32 dims[rank] | values
//! ```

use std::path::Path;

use super::{DType, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"P3CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl BlobData {
    fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            BlobData::F32(_) => DType::F32,
            BlobData::F64(_) => DType::F64,
        }
    }

    fn to_real<T: Real>(&self) -> Vec<T> {
        match self {
            BlobData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            BlobData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        }
    }

    fn from_real<T: Real>(v: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => BlobData::F32(v.iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => BlobData::F64(v.iter().map(|x| x.as_f64()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: BlobData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub blobs: Vec<Blob>,
}

const MOMENTUM_SUFFIX: &str = ".momentum";

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, dims: &[usize], values: &[T]) {
        self.blobs.push(Blob {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: BlobData::from_real(values),
        });
    }

    /// Values of a named blob converted to `T`.
    pub fn values<T: Real>(&self, name: &str) -> Result<Vec<T>> {
        self.get(name)
            .map(|b| b.data.to_real())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks blob `{name}`")))
    }

    /// Every parameter, its momentum buffer and every running buffer.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        let mut ck = Checkpoint::default();
        for p in store.params() {
            ck.push(&p.name, p.tensor.shape(), p.tensor.values());
            ck.push(format!("{}{MOMENTUM_SUFFIX}", p.name), p.tensor.shape(), &p.momentum);
        }
        for b in store.buffers() {
            ck.push(&b.name, b.tensor.shape(), b.tensor.values());
        }
        ck
    }

    /// Overwrites `store` in place. Names and shapes must match exactly.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let check = |name: &str, shape: &[usize]| -> Result<&Blob> {
            let blob = self
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks blob `{name}`")))?;
            let dims: Vec<usize> = blob.dims.iter().map(|&d| d as usize).collect();
            if dims != shape {
                return Err(Error::Config(format!(
                    "blob `{name}` has shape {dims:?}, model expects {shape:?}"
                )));
            }
            Ok(blob)
        };
        for p in store.params_mut() {
            let values = check(&p.name, p.tensor.shape())?.data.to_real();
            let momentum = check(&format!("{}{MOMENTUM_SUFFIX}", p.name), p.tensor.shape())?
                .data
                .to_real();
            p.tensor = Tensor::new(p.tensor.shape().to_vec(), values)?;
            p.momentum = momentum;
        }
        for b in store.buffers_mut() {
            let values = check(&b.name, b.tensor.shape())?.data.to_real();
            b.tensor = Tensor::new(b.tensor.shape().to_vec(), values)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.data.dtype().tag());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for d in &b.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &b.data {
                BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let count = r.u32()?;
        let mut blobs = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
                offset: at as u64,
                msg: "blob name is not UTF-8".into(),
            })?;
            let at = r.pos;
            let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Format {
                offset: at as u64,
                msg: "unknown dtype tag".into(),
            })?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u32()?);
            }
            let n = dims.iter().map(|&d| d as usize).product::<usize>();
            let at = r.pos;
            let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Format {
                offset: at as u64,
                msg: "blob size overflows".into(),
            })?)?;
            let data = match dtype {
                DType::F32 => BlobData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => BlobData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            debug_assert_eq!(data.len(), n);
            blobs.push(Blob { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: "trailing bytes after last blob".into(),
            });
        }
        Ok(Checkpoint { blobs })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
