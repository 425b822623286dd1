//! Flat binary container for named parameter blocks.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header  : b"HG3FCKPT" | version: u32 | block count: u32      (16 bytes)
//! block   : name length: u32 | name (UTF-8) | rank: u32
//!           | extents: u64 x rank | values: f64 x prod(extents)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HG3FCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed block {index}: {reason}")]
    Malformed { index: usize, reason: String },
}

pub fn write<W: Write>(mut w: W, params: &ParamSet) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for block in params.blocks() {
        let name = block.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = block.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in block.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<ParamSet, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for index in 0..count {
        let malformed = |reason: &str| CheckpointError::Malformed {
            index,
            reason: reason.to_string(),
        };
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| malformed("name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| malformed("extent"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed("element count overflows"))?;
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let value = Tensor::new(shape, data).map_err(|e| malformed(&e.to_string()))?;
        params.push(name, value);
    }
    Ok(params)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write(&mut buf, params)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    let bytes = fs::read(path)?;
    read(bytes.as_slice())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
