//! Binary library files.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"PLIB"`       |
//! | version      | u32 (= 1)       |
//! | n            | u32             |
//! | k            | u32             |
//! | entry count  | u64             |
//! | seed         | u64             |
//! | means        | k * n² f32      |
//! | entries      | count * (u32 category, n² f32 HR, n² f32 LR-up) |
//!
//! Category means are recomputed from the entries on load (in `f64`), and the
//! stored `f32` means are checked against them.

use std::path::Path;

use super::PairedLibrary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PLIB";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8;

impl PairedLibrary {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.n * self.n;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.k * d + self.len() * (1 + 2 * d)));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for &m in &self.means {
            out.extend_from_slice(&(m as f32).to_le_bytes());
        }
        for l in 0..self.len() {
            out.extend_from_slice(&self.categories[l].to_le_bytes());
            for &v in self.hr_patch(l).iter().chain(self.lr_patch(l)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::LibraryFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::LibraryFormat(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let count = usize::try_from(r.u64()?)
            .map_err(|_| Error::LibraryFormat("entry count overflows".into()))?;
        let seed = r.u64()?;
        if n < 3 || n % 2 == 0 || k == 0 {
            return Err(Error::LibraryFormat(format!("invalid header n = {n}, k = {k}")));
        }
        let d = n * n;
        let expected = HEADER_LEN as u128 + 4 * (k as u128 * d as u128 + count as u128 * (1 + 2 * d as u128));
        if bytes.len() as u128 != expected {
            return Err(Error::LibraryFormat(format!(
                "file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let stored_means: Vec<f32> = (0..k * d).map(|_| r.f32()).collect::<Result<_>>()?;
        let mut hr = Vec::with_capacity(count * d);
        let mut lr = Vec::with_capacity(count * d);
        let mut categories = Vec::with_capacity(count);
        for _ in 0..count {
            categories.push(r.u32()?);
            for _ in 0..d {
                hr.push(r.f32()?);
            }
            for _ in 0..d {
                lr.push(r.f32()?);
            }
        }
        if hr.iter().chain(&lr).any(|v| !v.is_finite()) {
            return Err(Error::LibraryFormat("non-finite patch intensity".into()));
        }
        let lib = Self::from_grouped(n, k, seed, hr, lr, categories)?;
        for (stored, &actual) in stored_means.iter().zip(&lib.means) {
            if *stored != actual as f32 {
                return Err(Error::LibraryFormat(
                    "stored category means disagree with the entries".into(),
                ));
            }
        }
        Ok(lib)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::LibraryFormat("unexpected end of file".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
