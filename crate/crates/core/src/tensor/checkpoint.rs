//! `ITCK` checkpoint files.
//!
//! Layout (all integers little-endian u32):
//! magic `ITCK`, version, tensor count, then per tensor: name length, UTF-8
//! name, rank, dims, raw little-endian f32 data. Version 1 appends a
//! length-prefixed UTF-8 JSON metadata record (length 0 when absent).

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ITCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: Option<String>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = self.metadata.as_deref().unwrap_or("");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.format("bad magic, expected ITCK"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.format(&format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.format("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.format(&e.to_string()))?;
            tensors.push((name, t));
        }
        let meta_len = r.u32()? as usize;
        let metadata = if meta_len == 0 {
            None
        } else {
            Some(
                String::from_utf8(r.take(meta_len)?.to_vec())
                    .map_err(|_| r.format("metadata is not UTF-8"))?,
            )
        };
        if r.pos != bytes.len() {
            return Err(r.format("trailing bytes after metadata"));
        }
        Ok(Self { tensors, metadata })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Length {
                path: self.path.to_path_buf(),
                expected: n,
                found: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn format(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let ckpt = Checkpoint {
            tensors: vec![("w".into(), Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap())],
            metadata: None,
        };
        let b = ckpt.to_bytes();
        assert_eq!(&b[..4], b"ITCK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(b[16], b'w');
        assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[21..25].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[25..29].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 33 + 4);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        assert!(matches!(
            Checkpoint::from_bytes(b"XTCK\x01\0\0\0\0\0\0\0\0\0\0\0", p),
            Err(Error::Format { .. })
        ));
        let ckpt = Checkpoint {
            tensors: vec![("w".into(), Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap())],
            metadata: Some("{}".into()),
        };
        let b = ckpt.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 9], p),
            Err(Error::Length { .. })
        ));
        assert_eq!(Checkpoint::from_bytes(&b, p).unwrap(), ckpt);
    }
}
