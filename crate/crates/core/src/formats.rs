//! Little-endian binary framing shared by dataset, checkpoint and bank files.
//!
//! Every file ends with a CRC32 (IEEE) of all bytes that precede it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gama_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{GamaError, Result};

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vals: &[f32]) {
        self.buf.reserve(vals.len() * 4);
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Append the trailing CRC32 and return the finished file image.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(GamaError::Truncated)?;
        if end > self.buf.len() {
            return Err(GamaError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(GamaError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn expect_magic(&mut self, magic: &'static str) -> Result<()> {
        if self.buf.len() < magic.len() || &self.buf[..magic.len()] != magic.as_bytes() {
            return Err(GamaError::BadMagic { expected: magic });
        }
        self.pos = magic.len();
        Ok(())
    }

    pub fn expect_version(&mut self, supported: u16) -> Result<()> {
        let v = self.u16()?;
        if v != supported {
            return Err(GamaError::UnsupportedVersion(v));
        }
        Ok(())
    }

    /// Verify the trailing CRC32 sits exactly at the current position.
    pub fn finish(self) -> Result<()> {
        let body = &self.buf[..self.pos];
        let rest = &self.buf[self.pos..];
        if rest.len() < 4 {
            return Err(GamaError::Truncated);
        }
        if rest.len() > 4 {
            return Err(GamaError::Data(format!(
                "{} unexpected trailing bytes",
                rest.len() - 4
            )));
        }
        let stored = u32::from_le_bytes(rest.try_into().unwrap());
        if stored != crc32fast::hash(body) {
            return Err(GamaError::Checksum);
        }
        Ok(())
    }
}

/// Named tensor record: name length u16, UTF-8 name, ndim u8, dims u32 each, f32 payload.
pub fn write_tensor_record(w: &mut ByteWriter, name: &str, t: &Tensor<f32>) {
    w.u16(name.len() as u16);
    w.bytes(name.as_bytes());
    w.u8(t.shape().len() as u8);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f32s(t.data());
}

pub fn read_tensor_record(r: &mut ByteReader<'_>) -> Result<(String, Tensor<f32>)> {
    let len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| GamaError::Data("tensor name is not UTF-8".into()))?
        .to_string();
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(GamaError::Truncated)?;
    let data = r.f32s(numel)?;
    let t = Tensor::new(shape, data).map_err(|e| GamaError::Data(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| GamaError::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GamaError::io(path, e))
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GamaError::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| GamaError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| GamaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| GamaError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| GamaError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_to_string(path)?)?)
}

/// JSON sidecar living next to a binary artifact (`x.gamd` → `x.json`).
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}
