//! Binary checkpoint container shared by the language model and the SELM mappers.
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! magic "SELMCKPT" | version | kind | n_config | config[n_config]
//! [kind = mappers only] lm_hash[32 bytes] | path_len | path bytes (UTF-8)
//! n_tensors | tensor*       (tensors in lexicographic name order)
//! tensor := name_len | name bytes | rank | dims[rank] | f32 values (LE, row-major)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParameterTree, Tensor};

pub const MAGIC: &[u8; 8] = b"SELMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    LanguageModel = 1,
    Mappers = 2,
}

/// Reference from a mapper checkpoint to the frozen language model it was trained against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmReference {
    pub sha256: [u8; 32],
    pub path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: CheckpointKind,
    pub config: Vec<u32>,
    pub lm_ref: Option<LmReference>,
    pub tensors: ParameterTree,
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION);
        put(&mut out, self.kind as u32);
        put(&mut out, self.config.len() as u32);
        for &c in &self.config {
            put(&mut out, c);
        }
        if self.kind == CheckpointKind::Mappers {
            let r = self.lm_ref.as_ref().expect("mapper checkpoints carry an LM reference");
            out.extend_from_slice(&r.sha256);
            put(&mut out, r.path.len() as u32);
            out.extend_from_slice(r.path.as_bytes());
        }
        put(&mut out, self.tensors.len() as u32);
        for (name, entry) in self.tensors.iter() {
            put(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            let shape = entry.tensor.shape();
            put(&mut out, shape.len() as u32);
            for &d in shape {
                put(&mut out, d as u32);
            }
            for v in entry.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a container; every tensor comes back with `frozen = true`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let at = r.pos;
        let kind = match r.u32()? {
            1 => CheckpointKind::LanguageModel,
            2 => CheckpointKind::Mappers,
            k => return Err(Error::format(at, format!("unknown checkpoint kind {k}"))),
        };
        let n_config = r.u32()? as usize;
        let config = (0..n_config).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let lm_ref = if kind == CheckpointKind::Mappers {
            let sha256: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let len = r.u32()? as usize;
            let at = r.pos;
            let path = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at, "LM path is not UTF-8"))?
                .to_string();
            Some(LmReference { sha256, path })
        } else {
            None
        };
        let n_tensors = r.u32()? as usize;
        let mut tensors = ParameterTree::new();
        let mut last: Option<String> = None;
        for _ in 0..n_tensors {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_string();
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(Error::format(at, format!("tensor {name} out of order")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::format(at, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            tensors.insert(name.clone(), t, true)?;
            last = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Container {
            kind,
            config,
            lm_ref,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, bytes))
    }
}

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::format(self.pos, format!("truncated: needed {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
