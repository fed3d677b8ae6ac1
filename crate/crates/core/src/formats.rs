//! Little-endian binary containers.
//!
//! * `IVFT` feature/IFC tensor: magic, u32 version, u32 N, u32 T, u32 K, then
//!   `N*T*K` f32 ordered k-major, then t, then n.
//! * `IVFW` demixing tensor: magic, u32 version, u32 N, u32 K, then `K*N*N`
//!   f32, each matrix row-major.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"IVFT";
pub const DEMIXING_MAGIC: &[u8; 4] = b"IVFW";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'a Path) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn fail(&self, reason: impl Into<String>) -> Error {
        Error::BadFormat { path: self.what.to_path_buf(), reason: reason.into() }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub(crate) fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.fail(format!("expected magic {:?}", std::str::from_utf8(magic).unwrap())));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.fail(format!("unsupported version {version}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

/// Serializes `K` slabs of `N x T` into `IVFT` bytes.
pub fn encode_tensor(slabs: &[DMatrix<f64>]) -> Vec<u8> {
    let (n, t) = slabs.first().map_or((0, 0), |s| s.shape());
    let mut out = Vec::with_capacity(20 + 4 * n * t * slabs.len());
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, n as u32);
    put_u32(&mut out, t as u32);
    put_u32(&mut out, slabs.len() as u32);
    for slab in slabs {
        // nalgebra is column-major: column t holds n = 0..N contiguously
        for &v in slab.as_slice() {
            put_f32(&mut out, v);
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Vec<DMatrix<f64>>> {
    let mut r = Reader::new(bytes, path);
    r.header(TENSOR_MAGIC)?;
    let (n, t, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let slabs = (0..k)
        .map(|_| {
            let vals = r.f32s(n * t)?;
            Ok(DMatrix::from_iterator(n, t, vals.into_iter().map(f64::from)))
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(slabs)
}

pub fn encode_demixing(mats: &[DMatrix<f64>]) -> Vec<u8> {
    let n = mats.first().map_or(0, |m| m.nrows());
    let mut out = Vec::with_capacity(16 + 4 * n * n * mats.len());
    out.extend_from_slice(DEMIXING_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, n as u32);
    put_u32(&mut out, mats.len() as u32);
    for m in mats {
        for i in 0..n {
            for j in 0..n {
                put_f32(&mut out, m[(i, j)]);
            }
        }
    }
    out
}

pub fn decode_demixing(bytes: &[u8], path: &Path) -> Result<Vec<DMatrix<f64>>> {
    let mut r = Reader::new(bytes, path);
    r.header(DEMIXING_MAGIC)?;
    let (n, k) = (r.u32()? as usize, r.u32()? as usize);
    let mats = (0..k)
        .map(|_| {
            let vals = r.f32s(n * n)?;
            Ok(DMatrix::from_row_iterator(n, n, vals.into_iter().map(f64::from)))
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(mats)
}

pub fn write_tensor(path: &Path, slabs: &[DMatrix<f64>]) -> Result<()> {
    Ok(fs::write(path, encode_tensor(slabs))?)
}

pub fn read_tensor(path: &Path) -> Result<Vec<DMatrix<f64>>> {
    decode_tensor(&fs::read(path)?, path)
}

pub fn write_demixing(path: &Path, mats: &[DMatrix<f64>]) -> Result<()> {
    Ok(fs::write(path, encode_demixing(mats))?)
}

pub fn read_demixing(path: &Path) -> Result<Vec<DMatrix<f64>>> {
    decode_demixing(&fs::read(path)?, path)
}
