//! Binary tensor archive.
//!
//! Layout (all integers little-endian):
//! `"TPTNTENS"`, `u32` version, `u8` dtype (4 or 8), `u64` metadata length,
//! metadata bytes (UTF-8, usually JSON), `u32` tensor count, then per tensor
//! `u32` name length, name, `u32` ndim, `u64` dims, raw element data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::TensorError;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TPTNTENS";
pub const VERSION: u32 = 1;

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive<T: Real> {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Archive<T> {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Decode, converting the stored precision to `T` if needed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TensorError::Archive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TensorError::ArchiveVersion {
                found: version,
                expected: VERSION,
            });
        }
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| TensorError::Archive(format!("unknown dtype tag {tag}")))?;
        let meta_len = r.u64()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| TensorError::Archive("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TensorError::Archive("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| TensorError::Archive(format!("tensor {name}: shape overflow")))?;
            let raw = r.take(
                numel
                    .checked_mul(dtype.size())
                    .ok_or_else(|| TensorError::Archive("size overflow".into()))?,
            )?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            };
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Archive(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), TensorError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TensorError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Write atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Archive(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_mismatch_is_typed() {
        let mut bytes = Archive::<f32>::new("{}").to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Archive::<f32>::from_bytes(&bytes),
            Err(TensorError::ArchiveVersion {
                found: 9,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncation_is_an_error() {
        let mut a = Archive::<f64>::new("m");
        a.push("w", Tensor::ones(&[3, 2]));
        let bytes = a.to_bytes();
        for cut in [0, 5, 13, bytes.len() - 1] {
            assert!(
                Archive::<f64>::from_bytes(&bytes[..cut]).is_err(),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn f64_archive_loads_as_f32() {
        let mut a = Archive::<f64>::new("");
        a.push("x", Tensor::row(vec![0.5, -1.25]));
        let b = Archive::<f32>::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b.get("x").unwrap().data(), &[0.5f32, -1.25]);
    }
}
