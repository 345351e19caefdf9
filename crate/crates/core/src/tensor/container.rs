//! `PUMT` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PUMT" | version: u8 | rank: u32 | extents: rank x u64 | values: n x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const PUMT_MAGIC: &[u8; 4] = b"PUMT";
pub const PUMT_VERSION: u8 = 1;

const MAX_RANK: u32 = 16;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(PUMT_MAGIC)?;
    w.write_all(&[PUMT_VERSION])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&t.to_le_bytes())?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PUMT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != PUMT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", version[0])));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} overflows")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    crate::io::write_atomic(path, &buf)
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}
