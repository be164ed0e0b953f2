//! `MLVG` tensor container used for frozen blocks and checkpoints.
//!
//! Layout (little-endian): magic `MLVG`, version u16, architecture tag u8,
//! d_llm u32, layer_index u32, then sections until the trailing u64 FNV-1a
//! checksum of every preceding byte. A section is name length u16, name
//! bytes, [version 2: flags u8, dtype u8], rank u8, extents u32 each, values.
//! Version 1 sections are always f32; version 2 records the dtype so
//! checkpoints can hold exact f64 state.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MLVG";
pub const VERSION_PLAIN: u16 = 1;
pub const VERSION_FLAGGED: u16 = 2;

const FLAG_TRAINABLE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        self.code() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub dtype: Dtype,
}

impl Section {
    pub fn frozen_f32(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            trainable: false,
            dtype: Dtype::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub version: u16,
    pub arch: u8,
    pub d_llm: u32,
    pub layer_index: u32,
    pub sections: Vec<Section>,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Container {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.version != VERSION_PLAIN && self.version != VERSION_FLAGGED {
            return Err(Error::Invalid(format!("unsupported container version {}", self.version)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.arch);
        out.extend_from_slice(&self.d_llm.to_le_bytes());
        out.extend_from_slice(&self.layer_index.to_le_bytes());
        for s in &self.sections {
            let name = s.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Invalid(format!("section name too long: {}", s.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            let dtype = if self.version == VERSION_PLAIN {
                if s.dtype != Dtype::F32 || s.trainable {
                    return Err(Error::Invalid(format!(
                        "section {} needs a flagged container (f64 or trainable)",
                        s.name
                    )));
                }
                Dtype::F32
            } else {
                out.push(if s.trainable { FLAG_TRAINABLE } else { 0 });
                out.push(s.dtype.code());
                s.dtype
            };
            let rank = u8::try_from(s.tensor.rank())
                .map_err(|_| Error::Invalid(format!("section {} has rank > 255", s.name)))?;
            out.push(rank);
            for &e in s.tensor.shape() {
                let e = u32::try_from(e).map_err(|_| Error::Invalid(format!("extent {e} exceeds u32")))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for &v in s.tensor.data() {
                match dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 8 {
            return Err(r.err("file shorter than its checksum"));
        }
        let body_end = bytes.len() - 8;
        let magic = r.take(4, body_end)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}, expected MLVG"),
            });
        }
        let version = r.u16(body_end)?;
        if version != VERSION_PLAIN && version != VERSION_FLAGGED {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let arch = r.u8(body_end)?;
        let d_llm = r.u32(body_end)?;
        let layer_index = r.u32(body_end)?;
        let mut sections = Vec::new();
        while r.pos < body_end {
            let start = r.pos;
            let name_len = r.u16(body_end)? as usize;
            let name = std::str::from_utf8(r.take(name_len, body_end)?)
                .map_err(|_| Error::Format {
                    offset: start + 2,
                    reason: "section name is not UTF-8".into(),
                })?
                .to_string();
            let (trainable, dtype) = if version == VERSION_FLAGGED {
                let flags = r.u8(body_end)?;
                let at = r.pos;
                let code = r.u8(body_end)?;
                let dtype = Dtype::from_code(code).ok_or_else(|| Error::Format {
                    offset: at,
                    reason: format!("unknown dtype code {code}"),
                })?;
                (flags & FLAG_TRAINABLE != 0, dtype)
            } else {
                (false, Dtype::F32)
            };
            let rank = r.u8(body_end)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(body_end)? as usize);
            }
            let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| Error::Format {
                offset: start,
                reason: format!("section {name} extents overflow"),
            })?;
            let raw = r.take(count.saturating_mul(dtype.width()), body_end)?;
            let data = match dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            sections.push(Section {
                name,
                tensor: Tensor::new(shape, data)?,
                trainable,
                dtype,
            });
        }
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let actual = fnv1a(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::Format {
                offset: body_end,
                reason: format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}"),
            });
        }
        Ok(Self {
            version,
            arch,
            d_llm,
            layer_index,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::Format {
            offset: self.pos,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, end: usize) -> Result<&'a [u8]> {
        if end - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated: need {n} bytes, {} left", end - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, end: usize) -> Result<u8> {
        Ok(self.take(1, end)?[0])
    }

    fn u16(&mut self, end: usize) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, end)?.try_into().unwrap()))
    }

    fn u32(&mut self, end: usize) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, end)?.try_into().unwrap()))
    }
}
