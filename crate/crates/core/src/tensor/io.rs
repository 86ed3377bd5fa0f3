//! `.tns` files: `PEELTNS1`, u32 LE rank, rank × u32 LE extents, then f32 LE
//! values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{PeelError, Result};

pub const TNS_MAGIC: &[u8; 8] = b"PEELTNS1";

pub fn write_tns_to<W: Write>(t: &Tensor, mut w: W) -> std::io::Result<()> {
    w.write_all(TNS_MAGIC)?;
    w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()
}

pub fn read_tns_from<R: Read>(mut r: R) -> Result<Tensor> {
    let bad = |what: &str| PeelError::invalid(format!("tns: {what}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != TNS_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated rank"))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > 8 {
        return Err(bad(&format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)
            .map_err(|_| bad("truncated extents"))?;
        dims.push(u32::from_le_bytes(word) as usize);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("extent product overflows"))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|_| bad("unreadable payload"))?;
    if bytes.len() != len * 4 {
        return Err(bad(&format!(
            "payload has {} bytes, dims {dims:?} need {}",
            bytes.len(),
            len * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let t = Tensor::new(dims, data)?;
    t.validate_finite("tns payload")?;
    Ok(t)
}

pub fn write_tns(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| PeelError::io(path, e))?;
    write_tns_to(t, BufWriter::new(f)).map_err(|e| PeelError::io(path, e))
}

pub fn read_tns(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| PeelError::io(path, e))?;
    read_tns_from(BufReader::new(f))
}
