//! Binary embedding tables, input fusion and a deterministic text encoder.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! "ICLE" | u8 version=1 | u8 kind | u16 reserved=0 | u32 count | u32 dim | count*dim f32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ICLE";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 16;
pub const NORM_TOLERANCE: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    EntityName,
    EntityDescription,
    RelationName,
    Fused,
}

impl EmbeddingKind {
    pub fn code(self) -> u8 {
        match self {
            EmbeddingKind::EntityName => 0,
            EmbeddingKind::EntityDescription => 1,
            EmbeddingKind::RelationName => 2,
            EmbeddingKind::Fused => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => EmbeddingKind::EntityName,
            1 => EmbeddingKind::EntityDescription,
            2 => EmbeddingKind::RelationName,
            3 => EmbeddingKind::Fused,
            other => return Err(Error::Format(format!("unknown embedding kind code {other}"))),
        })
    }

    fn unit_rows(self) -> bool {
        !matches!(self, EmbeddingKind::Fused)
    }
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbeddingKind::EntityName => "entity-name",
            EmbeddingKind::EntityDescription => "entity-description",
            EmbeddingKind::RelationName => "relation-name",
            EmbeddingKind::Fused => "fused",
        })
    }
}

/// Row-major `count x dim` matrix of f32 values; row `i` belongs to id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    kind: EmbeddingKind,
    count: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    /// Builds a table and checks its invariants.
    pub fn new(kind: EmbeddingKind, count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != count * dim {
            return Err(Error::Shape(format!(
                "{count} x {dim} table needs {} values, got {}",
                count * dim,
                data.len()
            )));
        }
        let table = EmbeddingTable { kind, count, dim, data };
        table.validate()?;
        Ok(table)
    }

    pub fn zeros(kind: EmbeddingKind, count: usize, dim: usize) -> Self {
        EmbeddingTable {
            kind,
            count,
            dim,
            data: vec![0.0; count * dim],
        }
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Checks finiteness and, for unit kinds, row norms. A description row may
    /// be all zeros, which marks a missing description.
    pub fn validate(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {} column {}",
                pos / self.dim.max(1),
                pos % self.dim.max(1)
            )));
        }
        if !self.kind.unit_rows() || self.dim == 0 {
            return Ok(());
        }
        for i in 0..self.count {
            let row = self.row(i);
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            let zero_ok = self.kind == EmbeddingKind::EntityDescription && norm == 0.0;
            if !zero_ok && (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Data(format!(
                    "{} row {i} has L2 norm {norm}, expected 1 +/- {NORM_TOLERANCE}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Zeros columns `start..start + len` of every row.
    pub fn zero_columns(&mut self, start: usize, len: usize) {
        for i in 0..self.count {
            let base = i * self.dim;
            self.data[base + start..base + start + len].fill(0.0);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.kind.code());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic, expected ICLE".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let kind = EmbeddingKind::from_code(bytes[5])?;
        let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
        if reserved != 0 {
            return Err(Error::Format(format!("reserved field is {reserved}, expected 0")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + 4 * count * dim;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingTable::new(kind, count, dim, data)
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    fs::write(path, table.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Concatenates name and description rows. Without a description table a
/// zero block of `desc_dim` columns is used.
pub fn fuse(name: &EmbeddingTable, desc: Option<&EmbeddingTable>, desc_dim: usize) -> Result<EmbeddingTable> {
    let desc_dim = desc.map_or(desc_dim, EmbeddingTable::dim);
    if let Some(d) = desc {
        if d.count() != name.count() {
            return Err(Error::Shape(format!(
                "name table has {} rows but description table has {}",
                name.count(),
                d.count()
            )));
        }
    }
    let dim = name.dim() + desc_dim;
    let mut data = Vec::with_capacity(name.count() * dim);
    for i in 0..name.count() {
        data.extend_from_slice(name.row(i));
        match desc {
            Some(d) => data.extend_from_slice(d.row(i)),
            None => data.extend(std::iter::repeat_n(0.0, desc_dim)),
        }
    }
    EmbeddingTable::new(EmbeddingKind::Fused, name.count(), dim, data)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const EMPTY_MARKER: &str = "\u{0}<empty>";

/// FNV-1a over the seed bytes followed by the token bytes.
pub fn seeded_hash(seed: u64, token: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic bag-of-words encoder used when no pretrained model is
/// available. Each whitespace token expands its seeded hash into a dense
/// vector of random signs; rows are the L2-normalized sums.
pub fn fallback_encode(texts: &[impl AsRef<str>], dim: usize, seed: u64, kind: EmbeddingKind) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::Config("fallback encoder needs dim >= 1".into()));
    }
    let mut data = Vec::with_capacity(texts.len() * dim);
    let mut acc = vec![0i64; dim];
    for text in texts {
        acc.fill(0);
        let mut any = false;
        for token in text.as_ref().split_whitespace() {
            any = true;
            let mut state = seeded_hash(seed, token);
            let mut bits = 0u64;
            for (k, a) in acc.iter_mut().enumerate() {
                if k % 64 == 0 {
                    bits = splitmix64(&mut state);
                }
                *a += if (bits >> (k % 64)) & 1 == 1 { 1 } else { -1 };
            }
        }
        if !any {
            let axis = (seeded_hash(seed, EMPTY_MARKER) % dim as u64) as usize;
            acc[axis] = 1;
        }
        let norm = acc.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Tokens cancelled exactly; fall back to the empty-text axis.
            let axis = (seeded_hash(seed, EMPTY_MARKER) % dim as u64) as usize;
            data.extend((0..dim).map(|k| if k == axis { 1.0 } else { 0.0 }));
        } else {
            data.extend(acc.iter().map(|&v| (v as f64 / norm) as f32));
        }
    }
    EmbeddingTable::new(kind, texts.len(), dim, data)
}
