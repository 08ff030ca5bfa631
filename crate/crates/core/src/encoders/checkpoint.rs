//! FDM1 checkpoints: magic `FDM1`, one JSON header line ending in `\n`, then
//! for each parameter until end of file: `u32` name length, UTF-8 name,
//! `u32` rank, `rank` x `u32` extents, and the `f64` values, all
//! little-endian.

use std::io::{BufRead, Read, Write};

use super::{ModelError, ParamStore};
use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDM1";

pub fn write_checkpoint<W: Write>(mut out: W, header: &str, params: &ParamStore) -> Result<(), ModelError> {
    if header.contains('\n') {
        return Err(ModelError::Checkpoint("header must be a single line".into()));
    }
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(header.as_bytes())?;
    out.write_all(b"\n")?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| ModelError::Checkpoint(format!("reading {what}: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Returns the header line (without `\n`) and the named tensors in file order.
pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<(String, Vec<(String, Tensor)>), ModelError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| ModelError::Checkpoint(format!("reading magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!("bad magic {magic:?}, expected FDM1")));
    }
    let mut header = String::new();
    input.read_line(&mut header)?;
    if header.pop() != Some('\n') {
        return Err(ModelError::Checkpoint("unterminated header line".into()));
    }
    let mut params = Vec::new();
    loop {
        if input.fill_buf()?.is_empty() {
            break;
        }
        let name_len = read_u32(&mut input, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(|e| ModelError::Checkpoint(format!("reading name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| ModelError::Checkpoint(format!("name: {e}")))?;
        let rank = read_u32(&mut input, "rank")? as usize;
        let shape =
            (0..rank).map(|_| read_u32(&mut input, "extent").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        input.read_exact(&mut raw).map_err(|e| ModelError::Checkpoint(format!("reading {name} values: {e}")))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
        params.push((name, t));
    }
    Ok((header, params))
}
