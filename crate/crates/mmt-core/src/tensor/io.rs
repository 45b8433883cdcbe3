//! The "TNSR" on-disk tensor format.
//!
//! Layout: magic bytes `TNSR`, u8 version (1), u32 rank, `rank` u32
//! dims, then the payload as little-endian f32 in row-major order.
//! Used for images, weight import/export, checkpoints and exported
//! features.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data().iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let fail = |msg: &str| Error::format(format!("{origin}: {msg}"));
    if bytes.len() < 9 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, expected TNSR"));
    }
    if bytes[4] != VERSION {
        return Err(fail(&format!(
            "unsupported version {} (expected {VERSION})",
            bytes[4]
        )));
    }
    let rank = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dims_end = 9 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fail("truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 9 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != dims_end + 4 * n {
        return Err(fail(&format!(
            "payload size {} does not match shape {shape:?}",
            bytes.len() - dims_end
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = dims_end + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path.as_ref(), encode(t)).map_err(Error::from)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    decode(&bytes, &path.display().to_string())
}
