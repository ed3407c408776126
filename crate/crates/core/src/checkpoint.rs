//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SHD4CKPT"
//! version   u32      currently 1
//! meta_len  u64      length of the metadata JSON
//! meta      bytes    UTF-8 JSON object
//! count     u32      number of tensor records
//! records:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8      0 = f64, 1 = f32
//!   flags    u8      bit 0 set when the tensor is trainable
//!   ndim     u32, then ndim x u64 extents
//!   values   product(extents) little-endian floats of the given dtype
//! ```
//!
//! Records appear in the model's parameter order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{HasParams, Param, Tensor};
use crate::Real;

pub const MAGIC: &[u8; 8] = b"SHD4CKPT";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;
const FLAG_TRAINABLE: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<Param>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(bad(format!("truncated while reading {what}")));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| bad(format!("{what} does not fit in memory")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &impl HasParams, metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: model.params().into_iter().cloned().collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(meta.len() + 64 + self.tensors.iter().map(|t| 32 + t.value.len() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let count = u32::try_from(self.tensors.len()).map_err(|_| bad("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for p in &self.tensors {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            let dtype = if cfg!(feature = "f32") { DTYPE_F32 } else { DTYPE_F64 };
            out.push(dtype);
            out.push(if p.trainable { FLAG_TRAINABLE } else { 0 });
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = r.len("metadata length")?;
        let metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u32("record count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| bad(format!("record {i} has a non-UTF-8 name")))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let flags = r.u8("flags")?;
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len("extent")?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("{name}: shape overflows")))?;
            let values: Vec<Real> = match dtype {
                DTYPE_F64 => r
                    .take(len.checked_mul(8).ok_or_else(|| bad("size overflow"))?, &name)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
                    .collect(),
                DTYPE_F32 => r
                    .take(len.checked_mul(4).ok_or_else(|| bad("size overflow"))?, &name)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
                    .collect(),
                other => return Err(bad(format!("{name}: unknown dtype {other}"))),
            };
            let value = Tensor::new(shape, values)?;
            tensors.push(Param {
                name,
                value,
                trainable: flags & FLAG_TRAINABLE != 0,
            });
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.tensors.iter().find(|p| p.name == name)
    }

    /// Copies every stored value into `model`. Each model parameter must be
    /// present with the same shape and trainability.
    pub fn apply(&self, model: &mut impl HasParams) -> Result<()> {
        let index: std::collections::HashMap<&str, &Param> = self.tensors.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in model.params_mut() {
            let Some(src) = index.get(p.name.as_str()) else {
                return Err(bad(format!("missing tensor {}", p.name)));
            };
            if src.value.shape() != p.value.shape() {
                return Err(bad(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            if src.trainable != p.trainable {
                return Err(bad(format!("{}: trainability differs", p.name)));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}
