//! Binary tensor records.
//!
//! Layout, all little-endian: magic `GCT1`, `u8` dtype code (0 = f32,
//! 1 = f64), `u8` rank, `rank × u64` extents, then the raw elements.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"GCT1";

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Format("rank exceeds 255".into()))?;
    let mut buf = Vec::with_capacity(6 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(T::DTYPE as u8);
    buf.push(rank);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads one record, converting to `T` if the stored dtype differs.
pub fn read_tensor<T: Scalar, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let mut head = [0u8; 6];
    input.read_exact(&mut head)?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}", &head[..4])));
    }
    let dtype = DType::from_code(head[4])
        .ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * dtype.size()];
    input.read_exact(&mut raw)?;
    let data: Vec<T> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    Tensor::from_vec(&shape, data)
}
