//! Little-endian encoding shared by the checkpoint and manifest formats.

use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use onellm_core::{DType, Scalar, Tensor};

use crate::{Error, Result};

pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    pub fn values<F: Scalar>(&mut self, data: &[F]) {
        self.buf.reserve(data.len() * F::DTYPE.size());
        for &v in data {
            v.write_le(&mut self.buf);
        }
    }

    /// Appends the FNV-1a hash of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let h = fnv64(&self.buf);
        self.u64(h);
        self.buf
    }
}

pub struct Reader<'a> {
    pub path: &'a Path,
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Self { path, buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }
    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    pub fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array(what)?))
    }
    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.format(format!("{what} is not UTF-8")))
    }
    pub fn values<F: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<F>> {
        let size = F::DTYPE.size();
        let len = n.checked_mul(size).ok_or_else(|| self.format(format!("{what} too large")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(size).map(F::read_le).collect())
    }

    pub fn format(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Splits `bytes` into body and trailing hash, checking the hash.
pub fn verify_trailer<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a [u8]> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "no integrity trailer".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != fnv64(body) {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            item: None,
        });
    }
    Ok(body)
}

pub fn write_tensor<F: Scalar>(w: &mut Writer, t: &Tensor<F>) {
    w.u8(F::DTYPE.tag());
    w.u8(t.ndim() as u8);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.values(t.data());
}

/// Shape and values of a tensor; the dtype must be `F`.
pub fn read_tensor<F: Scalar>(r: &mut Reader<'_>, what: &str) -> Result<Tensor<F>> {
    let tag = r.u8(what)?;
    if DType::from_tag(tag) != Some(F::DTYPE) {
        return Err(r.format(format!("{what}: dtype tag {tag}, expected {:?}", F::DTYPE)));
    }
    let ndim = r.u8(what)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64(what)? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.format(format!("{what}: shape overflows")))?;
    let data = r.values(n, what)?;
    Tensor::new(&shape, data).map_err(|e| r.format(format!("{what}: {e}")))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir: PathBuf = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
