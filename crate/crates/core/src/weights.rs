//! Named parameter tensors and the `HIDW` container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "HIDW" version=1 count
//! repeated count times:
//!     name_len  name (UTF-8)  rank  dims[rank]  data[prod(dims)] (f32 LE)
//! ```
//!
//! Tensors are written in lexicographic name order, so a given store always
//! serializes to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ConvWeights, Matrix, Tensor};

pub const MAGIC: &[u8; 4] = b"HIDW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(shape_err!("dims {dims:?} need {len} values, got {}", data.len()));
        }
        Ok(Self { dims, data })
    }
}

/// Every weight of a model, keyed by block path (e.g. `down.1.res.0.conv1.weight`).
///
/// Stores are immutable once built; all execution plans of one model resolve
/// their layers against the same store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Checks presence and exact dims of `name`.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&Param> {
        let p = self.get(name)?;
        if p.dims != dims {
            return Err(Error::MissingParameter(format!(
                "{name}: stored dims {:?}, model expects {dims:?}",
                p.dims
            )));
        }
        Ok(p)
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<&[f32]> {
        Ok(&self.expect(name, &[len])?.data)
    }

    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.expect(name, &[rows, cols])?.data.clone())
    }

    /// `{prefix}.weight` of dims `(c_out, c_in, k, k)` and `{prefix}.bias`.
    pub fn conv(&self, prefix: &str, c_out: usize, c_in: usize, k: usize) -> Result<ConvWeights> {
        let w = self.expect(&format!("{prefix}.weight"), &[c_out, c_in, k, k])?;
        let b = self.vector(&format!("{prefix}.bias"), c_out)?;
        ConvWeights::new(Tensor::new([c_out, c_in, k, k], w.data.clone())?, b.to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
            for &d in &p.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing HIDW magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported HIDW version {version}")));
        }
        let count = r.u32()?;
        let mut store = Self::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.params.insert(name.clone(), Param { dims, data }).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
