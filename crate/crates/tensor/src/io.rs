//! Little-endian tensor blobs: `rank: u64`, `extents: rank × u64`, then the
//! values as `f32`.

use std::io::{Read, Write};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Extents above this are rejected when reading, guarding allocation on
/// corrupt input.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<T: Element, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let rank = read_u64(r)?;
    if rank > 16 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        total = total.saturating_mul(d);
        shape.push(d as usize);
    }
    if total > MAX_ELEMENTS {
        return Err(TensorError::Format(format!("too many elements ({total})")));
    }
    let mut buf = vec![0u8; total as usize * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data)
}
