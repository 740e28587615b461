//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//! `"SDFTNSR1"`, `u32` record count, then per record: `u32` name length,
//! UTF-8 name, `u32` rank, `rank` x `u32` extents, values as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDFTNSR1";

pub fn write_params<W: Write>(store: &ParamStore, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parse a container; `origin` only labels error messages.
pub fn read_params<R: Read>(mut r: R, origin: &Path) -> Result<ParamStore> {
    let bad = |detail: String| Error::format(origin, detail);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| bad(format!("truncated header: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r).map_err(|e| bad(e.to_string()))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(|e| bad(e.to_string()))? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = read_u32(&mut r).map_err(|e| bad(e.to_string()))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r).map_err(|e| bad(e.to_string()))? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)
            .map_err(|e| bad(format!("values of `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| bad(e.to_string()))?;
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_params(store, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(std::io::BufReader::new(file), path)
}
