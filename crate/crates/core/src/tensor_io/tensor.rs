//! The `.vxt` tensor container.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! ```text
//! "VXT1" | dtype: u8 | ndim: u8 | ndim x u64 dims | row-major payload
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = u8.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXT1";
pub const MAX_RANK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

/// Dense row-major tensor of rank 1 to 5.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "tensor rank must be in [1, {MAX_RANK}], got {}",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Tensor::new(shape, TensorData::U8(data))
    }

    pub fn zeros_f64(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::from_f64(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64 (u8 values are taken verbatim, not rescaled).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    /// Narrow a float tensor to f32 storage (used for serialized artifacts).
    pub fn to_f32(&self) -> Tensor {
        let data = match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            data: TensorData::F32(data),
        }
    }

    /// Fails with a `Shape` error unless the shape matches `expected`;
    /// `None` entries match any size.
    pub fn expect_shape(&self, what: &str, expected: &[Option<usize>]) -> Result<()> {
        let ok = self.shape.len() == expected.len()
            && self
                .shape
                .iter()
                .zip(expected)
                .all(|(&s, e)| e.is_none_or(|e| e == s));
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: expected shape {:?}, got {:?}",
                expected, self.shape
            )))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 8 * self.shape.len() + self.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parse one tensor from the front of `bytes`, returning it together with
    /// the number of bytes consumed. `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(Tensor, usize)> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "{}: missing VXT1 magic",
                origin.display()
            )));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| {
            Error::Format(format!(
                "{}: unknown dtype code {}",
                origin.display(),
                bytes[4]
            ))
        })?;
        let ndim = bytes[5] as usize;
        if ndim == 0 || ndim > MAX_RANK {
            return Err(Error::Format(format!(
                "{}: rank {ndim} outside [1, {MAX_RANK}]",
                origin.display()
            )));
        }
        let header = 6 + 8 * ndim;
        if bytes.len() < header {
            return Err(Error::Truncation {
                path: origin.to_path_buf(),
                expected: header,
                found: bytes.len(),
            });
        }
        let mut shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let raw: [u8; 8] = bytes[6 + 8 * i..14 + 8 * i].try_into().unwrap();
            let d = u64::from_le_bytes(raw);
            shape.push(usize::try_from(d).map_err(|_| {
                Error::Format(format!("{}: dimension {d} too large", origin.display()))
            })?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{}: element count overflows", origin.display())))?;
        let payload = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format(format!("{}: payload size overflows", origin.display())))?;
        let available = bytes.len() - header;
        if available < payload {
            return Err(Error::Truncation {
                path: origin.to_path_buf(),
                expected: payload,
                found: available,
            });
        }
        let body = &bytes[header..header + payload];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(body.to_vec()),
        };
        Ok((Tensor { shape, data }, header + payload))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = Tensor::from_bytes(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_f32_file_is_18_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.vxt");
        write_tensor(&p, &Tensor::from_f32(vec![1], vec![0.0]).unwrap()).unwrap();
        let bytes = fs::read(&p).unwrap();
        let mut expected = b"VXT1".to_vec();
        expected.extend_from_slice(&[1, 1]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 18);
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), &[1]);
        assert_eq!(back.to_f64_vec(), vec![0.0]);
    }

    #[test]
    fn u8_zeros_layout() {
        let t = Tensor::from_u8(vec![2, 3], vec![0; 6]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 6 + 16 + 6);
        assert_eq!(bytes[4], 3);
        assert_eq!(bytes[5], 2);
        assert!(bytes[22..].iter().all(|&b| b == 0));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vxt");
        fs::write(&p, b"XXXX\x01\x01\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_dtype_is_format_error() {
        let mut bytes = Tensor::from_u8(vec![1], vec![7]).unwrap().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Tensor::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn short_payload_is_truncation() {
        let t = Tensor::from_u8(vec![100], vec![1; 100]).unwrap();
        let bytes = t.to_bytes();
        let cut = &bytes[..bytes.len() - 50];
        match Tensor::from_bytes(cut, Path::new("mem")) {
            Err(Error::Truncation { expected, found, .. }) => {
                assert_eq!(expected, 100);
                assert_eq!(found, 50);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn rank_and_count_invariants() {
        assert!(Tensor::from_f64(vec![], vec![]).is_err());
        assert!(Tensor::from_f64(vec![1; 6], vec![0.0]).is_err());
        assert!(Tensor::from_f64(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_tensor("/definitely/not/here.vxt").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.vxt"));
    }
}
