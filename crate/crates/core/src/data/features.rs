//! `MLVF` feature files: magic, version u16, rank u8, extents u32 each,
//! then little-endian f32 values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MLVF";
pub const VERSION: u16 = 1;

/// Rounds every value to the nearest f32, i.e. to what the file stores.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

pub fn encode_features(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Invalid(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Invalid(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn truncated(offset: usize, need: usize, have: usize) -> Error {
    Error::Format {
        offset,
        reason: format!("truncated: need {need} bytes, {have} left"),
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(truncated(0, 4, bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {:?}, expected MLVF", &bytes[..4]),
        });
    }
    if bytes.len() < 7 {
        return Err(truncated(4, 3, bytes.len() - 4));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let rank = bytes[6] as usize;
    let mut pos = 7;
    if bytes.len() - pos < 4 * rank {
        return Err(truncated(pos, 4 * rank, bytes.len() - pos));
    }
    let shape: Vec<usize> = bytes[pos..pos + 4 * rank]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    pos += 4 * rank;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format {
            offset: 7,
            reason: format!("extents {shape:?} overflow"),
        })?;
    let left = bytes.len() - pos;
    if left < count {
        return Err(truncated(pos, count, left));
    }
    if left > count {
        return Err(Error::Format {
            offset: pos + count,
            reason: format!("{} trailing bytes", left - count),
        });
    }
    let data = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data)
}

/// Writes through a sibling temp file and a rename, so readers never see a
/// partial file.
pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_features(t)?)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
