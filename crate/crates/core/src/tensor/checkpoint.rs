//! Checkpoint layout (little-endian):
//!
//! ```text
//! "ICLC" | u8 version | u32 tensor count |
//!   per tensor: u16 name length | UTF-8 name | u8 rank | u32 extents[rank] | f32 payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ICLC";
const VERSION: u8 = 1;

/// Named f32 tensors in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_params(prefix: &str, params: &ParamSet<f32>) -> Self {
        let mut ck = Checkpoint::default();
        ck.extend(prefix, params);
        ck
    }

    pub fn extend(&mut self, prefix: &str, params: &ParamSet<f32>) {
        for t in params.iter() {
            let name = format!("{prefix}{}", t.name);
            self.tensors.push(Tensor::new(name, t.shape().to_vec(), t.values().to_vec()).expect("consistent"));
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        for t in &self.tensors {
            if let Some(rest) = t.name.strip_prefix(prefix) {
                p.push(Tensor::new(rest, t.shape().to_vec(), t.values().to_vec()).expect("consistent"));
            }
        }
        p
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {}", t.name)))?;
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("rank too large: {}", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected ICLC".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4)?;
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor {name} holds non-finite values")));
            }
            tensors.push(Tensor::new(name, shape, values)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
