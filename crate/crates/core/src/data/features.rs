//! WFTF feature files: magic `WFTF`, then little-endian u32 version, u32
//! rows, u32 dim, and rows·dim f64 values in row-major order.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"WFTF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const WHAT: &str = "feature file";

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::shape(
            "encode_features",
            format!("expected [m, dim], got {s:?}"),
        ));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * features.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in s {
        let d = u32::try_from(*d)
            .map_err(|_| Error::shape("encode_features", "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses and validates a header, returning `(rows, dim)`.
pub fn decode_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { what: WHAT });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            what: WHAT,
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { what: WHAT });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::BadVersion {
            what: WHAT,
            version,
        });
    }
    Ok((u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize))
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let (m, dim) = decode_header(bytes)?;
    let body = &bytes[HEADER_LEN..];
    let expected = m
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .ok_or(Error::Truncated { what: WHAT })?;
    if body.len() < expected {
        return Err(Error::Truncated { what: WHAT });
    }
    if body.len() > expected {
        return Err(Error::shape(
            "decode_features",
            format!("{} trailing bytes", body.len() - expected),
        ));
    }
    let mut data = Vec::with_capacity(m * dim);
    for (index, chunk) in body.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { what: WHAT, index });
        }
        data.push(v);
    }
    Tensor::new([m, dim], data)
}

pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_features(&fs::read(path)?)
}

/// Reads only the header; returns `(rows, dim)`.
pub fn read_header(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN);
    fs::File::open(path)?
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)?;
    decode_header(&buf)
}
