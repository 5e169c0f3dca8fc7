//! The `SEVX` tensor container used for checkpoints, feature caches and
//! analysis dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SEVX"  u32 version
//! u64 metadata length, UTF-8 metadata
//! u64 tensor count
//! per tensor: u64 name length, UTF-8 name, u64 rank, rank × u64 dims,
//!             numel × f32 payload
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SEVX";
pub const VERSION: u32 = 1;

/// Free-form metadata plus an ordered list of named f32 tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: String,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<(String, Tensor<f32>)> {
        self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|(n, t)| 16 + n.len() + 8 * t.rank() + 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(24 + self.metadata.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u64(&mut out, self.metadata.len());
        out.extend_from_slice(self.metadata.as_bytes());
        put_u64(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u64(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.rank());
            for &d in t.shape() {
                put_u64(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses `bytes`; `path` only labels diagnostics.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error_at(0, "bad magic; not a SEVX file"));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let meta_len = r.len("metadata length")?;
        let metadata = r.string(meta_len, "metadata")?;
        let count = r.u64("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let at = r.pos as u64;
            let name_len = r.len("name length")?;
            let name = r.string(name_len, "tensor name")?;
            let rank = r.len("rank")?;
            if rank > 8 {
                return Err(r.error_at(at, format!("tensor {i} ({name}) has implausible rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.len("dimension")?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error_at(r.pos as u64, format!("truncated payload: tensor {name} {dims:?} runs past end of file")))?;
            let data = r
                .take(4 * numel, "payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| r.error_at(at, format!("tensor {name}: {e}")))?;
            if tensors.iter().any(|(n, _): &(String, _)| *n == name) {
                return Err(r.error_at(at, format!("duplicate tensor name {name:?}")));
            }
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(r.error_at(r.pos as u64, format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: u64, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            msg: msg.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error_at(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.error_at(at, format!("{what} {v} exceeds file size")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error_at(at, format!("{what} is not UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("model.scale_factor = 0.125\n");
        c.push("a", Tensor::new([2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, f32::MAX, -7.25]).unwrap())
            .unwrap();
        c.push("b.c", Tensor::scalar(0.1)).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.metadata, c.metadata);
        let a = back.get("a").unwrap();
        assert_eq!(a.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SEVX");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(meta, 27);
        let count = u64::from_le_bytes(bytes[16 + meta..24 + meta].try_into().unwrap());
        assert_eq!(count, 2);
    }

    #[test]
    fn corruption_reports_offset() {
        let bytes = sample().to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3], Path::new("ckpt.sevx")).unwrap_err();
        match err {
            Error::Format { path, offset, msg } => {
                assert_eq!(path, Path::new("ckpt.sevx"));
                assert!(offset > 0 && msg.contains("truncated"), "{offset} {msg}");
            }
            e => panic!("{e}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad, Path::new("f")), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(Container::from_bytes(&extra, Path::new("f")).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        assert!(c.push("a", Tensor::scalar(1.0)).is_err());
    }
}
