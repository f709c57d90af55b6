//! `UWAVTENS` binary container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   8 bytes  "UWAVTENS"
//! version u32      1
//! rank    u32
//! dims    u32 x rank
//! payload f32 x prod(dims), row-major
//! ```

use std::fs;
use std::path::Path;

use super::{numel, Elem, Tensor};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 8] = b"UWAVTENS";
pub const VERSION: u32 = 1;

/// Shape plus row-major `f32` payload, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "payload of {} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor<E: Elem>(t: &Tensor<E>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.to_f32_vec(),
        }
    }

    pub fn to_tensor<E: Elem>(&self) -> Result<Tensor<E>> {
        Tensor::from_f32(self.shape.clone(), &self.data)
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

pub fn encode(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.shape.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
    let end = *pos + n;
    if end > bytes.len() {
        return Err(FormatError::Truncated {
            what,
            expected: n,
            found: bytes.len().saturating_sub(*pos),
        });
    }
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn u32_at(s: &[u8]) -> u32 {
    u32::from_le_bytes([s[0], s[1], s[2], s[3]])
}

pub fn decode(bytes: &[u8]) -> std::result::Result<RawTensor, FormatError> {
    let mut pos = 0;
    let magic = take(bytes, &mut pos, 8, "magic")?;
    if magic != MAGIC {
        let mut found = [0u8; 8];
        found.copy_from_slice(magic);
        return Err(FormatError::BadMagic { found });
    }
    let version = u32_at(take(bytes, &mut pos, 4, "version")?);
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let rank = u32_at(take(bytes, &mut pos, 4, "rank")?) as usize;
    if rank > 8 {
        return Err(FormatError::Header(format!("rank {rank} too large")));
    }
    let dims = take(bytes, &mut pos, 4 * rank, "dims")?;
    let shape: Vec<usize> = dims.chunks_exact(4).map(|c| u32_at(c) as usize).collect();
    if shape.contains(&0) {
        return Err(FormatError::Header(format!("zero dimension in {shape:?}")));
    }
    let n = numel(&shape);
    let payload = take(bytes, &mut pos, 4 * n, "payload")?;
    if pos != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - pos));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(RawTensor { shape, data })
}

pub fn write_tensor(path: &Path, t: &RawTensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    decode(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode(&RawTensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        bytes[7] = b'X';
        assert!(matches!(decode(&bytes), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn version_and_truncation() {
        let good = encode(&RawTensor::new(vec![10, 32], vec![0.5; 320]).unwrap());
        let mut v2 = good.clone();
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(FormatError::Version(2))));
        let short = &good[..good.len() - 4];
        assert!(matches!(
            decode(short),
            Err(FormatError::Truncated { what: "payload", .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(FormatError::Trailing(1))));
    }

    #[test]
    fn header_is_little_endian() {
        let bytes = encode(&RawTensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        assert_eq!(&bytes[..8], b"UWAVTENS");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 1usize..12, cols in 1usize..40, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits((i as u32).wrapping_mul(2654435761) ^ seed) )
                .map(|v| if v.is_finite() { v } else { 0.0 })
                .collect();
            let t = RawTensor::new(vec![rows, cols], data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape, t.shape);
            let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
