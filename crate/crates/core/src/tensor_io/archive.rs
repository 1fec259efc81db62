//! Named-tensor archive used for checkpoints.
//!
//! ```text
//! "VXA1" | count: u32 | count x (name_len: u32 | name utf-8 | blob_len: u64 | VXT1 blob)
//! ```

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"VXA1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Archive::get`] but a missing entry is a format error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("archive entry `{name}` missing")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ARCHIVE_MAGIC.to_vec();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let blob = t.to_bytes();
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Archive> {
        let truncated = |expected: usize, found: usize| Error::Truncation {
            path: origin.to_path_buf(),
            expected,
            found,
        };
        if bytes.len() < 8 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(Error::Format(format!("{}: missing VXA1 magic", origin.display())));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut pos = 8;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len_bytes = bytes.get(pos..pos + 4).ok_or_else(|| truncated(pos + 4, bytes.len()))?;
            let name_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            pos += 4;
            let name = bytes
                .get(pos..pos + name_len)
                .ok_or_else(|| truncated(pos + name_len, bytes.len()))?;
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::Format(format!("{}: entry name not utf-8", origin.display())))?;
            pos += name_len;
            let blob_len = bytes.get(pos..pos + 8).ok_or_else(|| truncated(pos + 8, bytes.len()))?;
            let blob_len = u64::from_le_bytes(blob_len.try_into().unwrap()) as usize;
            pos += 8;
            let blob = bytes
                .get(pos..pos + blob_len)
                .ok_or_else(|| truncated(pos + blob_len, bytes.len()))?;
            let (t, used) = Tensor::from_bytes(blob, origin)?;
            if used != blob_len {
                return Err(Error::Format(format!("{}: entry `{name}` length mismatch", origin.display())));
            }
            pos += blob_len;
            entries.push((name, t));
        }
        Ok(Archive { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Archive> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_lookup() {
        let mut a = Archive::new();
        a.insert("x", Tensor::from_f64(vec![2], vec![1.5, -2.0]).unwrap());
        a.insert("mask", Tensor::from_u8(vec![1, 3], vec![1, 0, 1]).unwrap());
        a.insert("x", Tensor::from_f64(vec![1], vec![9.0]).unwrap());
        let b = Archive::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.require("x").unwrap().to_f64_vec(), vec![9.0]);
        assert!(b.require("nope").is_err());
        assert_eq!(b.names().collect::<Vec<_>>(), vec!["x", "mask"]);
    }

    #[test]
    fn truncated_archive_fails() {
        let mut a = Archive::new();
        a.insert("x", Tensor::from_f64(vec![4], vec![0.0; 4]).unwrap());
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
    }
}
