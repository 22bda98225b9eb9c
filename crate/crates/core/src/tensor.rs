//! Dense tensors and the `.tnsr` on-disk format.
//!
//! A `.tnsr` file is little-endian throughout: magic bytes `TNSR`, a `u8`
//! format version (currently 1), a `u8` dtype code (0 = float32, 1 = uint8),
//! a `u8` rank, `rank` dimensions as `u32`, then the row-major payload.
//! Round-trips are bit-exact.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

pub const TNSR_MAGIC: [u8; 4] = *b"TNSR";
pub const TNSR_VERSION: u8 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic: expected \"TNSR\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} (expected {TNSR_VERSION})")]
    BadVersion { found: u8 },
    #[error("unknown dtype code {found} (0 = float32, 1 = uint8)")]
    BadDtype { found: u8 },
    #[error("invalid rank {found} (must be 1..={MAX_RANK})")]
    BadRank { found: u8 },
    #[error("invalid dimension: axis {axis} has extent 0")]
    ZeroDim { axis: usize },
    #[error("truncated file while reading {field}: needed {needed} bytes, had {available}")]
    Truncated {
        field: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("trailing garbage: {extra} bytes past the payload")]
    TrailingBytes { extra: usize },
    #[error("non-finite float32 payload at flat index {index}")]
    NonFinite { index: usize },
    #[error("dimension {dim} exceeds the u32 range of the format")]
    DimTooLarge { dim: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Element type of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self, TensorError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8),
            found => Err(TensorError::BadDtype { found }),
        }
    }
}

/// Dense N-dimensional array with explicit dtype; the carrier for images,
/// label maps and network parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
}

impl Tensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            Tensor::F32(_) => Dtype::F32,
            Tensor::U8(_) => Dtype::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::U8(a) => a.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&ArrayD<f32>> {
        match self {
            Tensor::F32(a) => Some(a),
            Tensor::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&ArrayD<u8>> {
        match self {
            Tensor::U8(a) => Some(a),
            Tensor::F32(_) => None,
        }
    }
}

impl From<ArrayD<f32>> for Tensor {
    fn from(a: ArrayD<f32>) -> Self {
        Tensor::F32(a)
    }
}

impl From<ArrayD<u8>> for Tensor {
    fn from(a: ArrayD<u8>) -> Self {
        Tensor::U8(a)
    }
}

fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(TensorError::BadRank {
            found: shape.len() as u8,
        });
    }
    for (axis, &d) in shape.iter().enumerate() {
        if d == 0 {
            return Err(TensorError::ZeroDim { axis });
        }
        if d > u32::MAX as usize {
            return Err(TensorError::DimTooLarge { dim: d });
        }
    }
    Ok(())
}

fn check_finite(values: &[f32]) -> Result<(), TensorError> {
    for (index, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(TensorError::NonFinite { index });
        }
    }
    Ok(())
}

/// Serialize a tensor to `.tnsr` bytes. Rejects non-finite float payloads.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>, TensorError> {
    check_shape(t.shape())?;
    let payload_len = match t {
        Tensor::F32(a) => a.len() * 4,
        Tensor::U8(a) => a.len(),
    };
    let mut out = Vec::with_capacity(7 + 4 * t.shape().len() + payload_len);
    out.extend_from_slice(&TNSR_MAGIC);
    out.push(TNSR_VERSION);
    out.push(t.dtype().code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t {
        Tensor::F32(a) => {
            let slice = a.as_slice().expect("tensor must be standard layout");
            check_finite(slice)?;
            for v in slice {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::U8(a) => {
            out.extend_from_slice(a.as_slice().expect("tensor must be standard layout"));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], TensorError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(TensorError::Truncated {
                field,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parse `.tnsr` bytes back into a tensor, validating every header field.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, TensorError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != TNSR_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(TensorError::BadMagic { found });
    }
    let version = cur.take(1, "version")?[0];
    if version != TNSR_VERSION {
        return Err(TensorError::BadVersion { found: version });
    }
    let dtype = Dtype::from_code(cur.take(1, "dtype")?[0])?;
    let rank = cur.take(1, "rank")?[0];
    if rank == 0 || rank as usize > MAX_RANK {
        return Err(TensorError::BadRank { found: rank });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for axis in 0..rank as usize {
        let raw = cur.take(4, "dims")?;
        let d = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(TensorError::ZeroDim { axis });
        }
        shape.push(d);
    }
    let count: usize = shape.iter().product();
    let tensor = match dtype {
        Dtype::F32 => {
            let payload = cur.take(count * 4, "payload")?;
            let mut values = Vec::with_capacity(count);
            for chunk in payload.chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            check_finite(&values)?;
            Tensor::F32(ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap())
        }
        Dtype::U8 => {
            let payload = cur.take(count, "payload")?;
            Tensor::U8(ArrayD::from_shape_vec(IxDyn(&shape), payload.to_vec()).unwrap())
        }
    };
    if cur.pos != bytes.len() {
        return Err(TensorError::TrailingBytes {
            extra: bytes.len() - cur.pos,
        });
    }
    Ok(tensor)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(t: &Tensor) -> Tensor {
        decode_tensor(&encode_tensor(t).unwrap()).unwrap()
    }

    #[test]
    fn roundtrip_zeros_2x3() {
        let t = Tensor::F32(ArrayD::zeros(IxDyn(&[2, 3])));
        assert_eq!(roundtrip(&t), t);
    }

    #[test]
    fn roundtrip_seeded_random_4x64x64_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f32> = (0..4 * 64 * 64)
            .map(|_| rng.random_range(-10.0f32..10.0))
            .collect();
        let t = Tensor::F32(ArrayD::from_shape_vec(IxDyn(&[4, 64, 64]), values).unwrap());
        // byte-compare oracle: encoded bytes of the round-tripped tensor are identical
        let bytes = encode_tensor(&t).unwrap();
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(encode_tensor(&back).unwrap(), bytes);
        assert_eq!(back, t);
    }

    #[test]
    fn roundtrip_u8() {
        let t = Tensor::U8(ArrayD::from_shape_vec(IxDyn(&[3, 5]), (0u8..15).collect()).unwrap());
        assert_eq!(roundtrip(&t), t);
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode_tensor(&Tensor::U8(ArrayD::zeros(IxDyn(&[2, 2])))).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(matches!(err, TensorError::BadMagic { .. }));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn bad_dtype_code() {
        let mut bytes = encode_tensor(&Tensor::U8(ArrayD::zeros(IxDyn(&[2, 2])))).unwrap();
        bytes[5] = 9;
        assert!(matches!(
            decode_tensor(&bytes).unwrap_err(),
            TensorError::BadDtype { found: 9 }
        ));
    }

    #[test]
    fn truncated_payload_names_field() {
        let bytes = encode_tensor(&Tensor::F32(ArrayD::zeros(IxDyn(&[4, 4])))).unwrap();
        let err = decode_tensor(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            TensorError::Truncated { field, .. } => assert_eq!(field, "payload"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_dims_names_field() {
        let bytes = encode_tensor(&Tensor::F32(ArrayD::zeros(IxDyn(&[4, 4])))).unwrap();
        let err = decode_tensor(&bytes[..9]).unwrap_err();
        match err {
            TensorError::Truncated { field, .. } => assert_eq!(field, "dims"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_rejected_on_write() {
        let t = Tensor::F32(ArrayD::from_elem(IxDyn(&[2]), f32::NAN));
        assert!(matches!(
            encode_tensor(&t).unwrap_err(),
            TensorError::NonFinite { .. }
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::F32(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.0; 6]).unwrap());
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }
}
