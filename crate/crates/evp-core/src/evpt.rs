//! EVPT tensor file format, bit-exact.
//!
//! Layout: bytes 0-3 magic `EVPT`; byte 4 version (1); byte 5 dtype tag
//! (0 = float32, 1 = float64); byte 6 rank; byte 7 zero pad; then rank
//! little-endian u64 extents; then the row-major little-endian payload.
//! Readers reject anything that deviates: wrong magic, wrong version,
//! unknown dtype, and any length mismatch.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};

pub const MAGIC: [u8; 4] = *b"EVPT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

/// Serialized byte length of a tensor with the given dtype and shape.
pub fn encoded_len(dtype: Dtype, shape: &[usize]) -> usize {
    let numel: usize = shape.iter().product();
    HEADER_LEN + 8 * shape.len() + numel * dtype.size_bytes()
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(T::DTYPE, t.shape()));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    out.push(0);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Dtype and shape of an encoded tensor, without decoding the payload.
pub fn peek(bytes: &[u8]) -> Result<(Dtype, Vec<usize>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(Error::BadVersion(bytes[4]));
    }
    let dtype = Dtype::from_tag(bytes[5])?;
    let rank = bytes[6] as usize;
    let dims_end = HEADER_LEN + 8 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Truncated { expected: dims_end as u64, found: bytes.len() as u64 });
    }
    let mut shape = Vec::with_capacity(rank);
    for d in 0..rank {
        let at = HEADER_LEN + 8 * d;
        let extent = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        shape.push(usize::try_from(extent).map_err(|_| {
            Error::InvalidArgument(format!("extent {extent} exceeds addressable size"))
        })?);
    }
    Ok((dtype, shape))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (dtype, shape) = peek(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::DtypeMismatch { expected: T::DTYPE.name(), found: dtype.name() });
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::InvalidArgument(format!("shape {shape:?} overflows")))?;
    let expected = (HEADER_LEN + 8 * shape.len() + numel * dtype.size_bytes()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated { expected, found: bytes.len() as u64 });
    }
    let w = dtype.size_bytes();
    let start = HEADER_LEN + 8 * shape.len();
    let data: Vec<T> =
        (0..numel).map(|i| T::read_le(&bytes[start + i * w..start + (i + 1) * w])).collect();
    Tensor::new(shape, data)
}

pub fn write_file<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path.as_ref(), encode(t)).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_file<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode(&bytes)
}
