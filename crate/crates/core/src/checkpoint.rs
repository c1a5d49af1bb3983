//! Little-endian binary checkpoint of named tensors.
//!
//! Layout: magic `CLTDCKPT` (8 bytes), version u32, tensor count u64, then
//! per tensor: name length u32 + UTF-8 name, rank u32, extents u64 each, and
//! the f64 payload. Everything little-endian; loading is bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CLTDCKPT";
const VERSION: u32 = 1;

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{path:?}: bad checkpoint magic")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{path:?}: unsupported checkpoint version {version}"
        )));
    }
    let count = read_u64(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        entries.push((name.clone(), Tensor::from_vec(&shape, data)?));
    }
    Ok(entries)
}

/// Drop every tensor whose name starts with `prefix` (e.g. the training-only
/// `cltd.` block before an inference-only deployment).
pub fn strip_prefix(entries: Vec<(String, Tensor)>, prefix: &str) -> Vec<(String, Tensor)> {
    entries
        .into_iter()
        .filter(|(n, _)| !n.starts_with(prefix))
        .collect()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
