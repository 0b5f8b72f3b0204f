//! Artifact plumbing: atomic writes, content hashes and the self-describing
//! binary container used for dataset caches and checkpoints.
//!
//! Container layout: 8-byte magic, little-endian `u64` header length, UTF-8
//! JSON header, then an opaque payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp.{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Canonical JSON: object keys sorted, no insignificant whitespace.
pub fn canonical_json(value: &impl Serialize) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn stable_json_pretty(value: &impl Serialize) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Hex SHA-256 of the canonical JSON form.
pub fn content_hash(value: &impl Serialize) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_container(path: &Path, magic: &[u8; 8], header: &impl Serialize, payload: &[u8]) -> Result<()> {
    let header = canonical_json(header)?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(magic);
    let mut len = [0u8; 8];
    LittleEndian::write_u64(&mut len, header.len() as u64);
    bytes.extend_from_slice(&len);
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(payload);
    atomic_write(path, &bytes)
}

pub fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(serde_json::Value, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Artifact {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(corrupt("bad magic"));
    }
    let hlen = LittleEndian::read_u64(&bytes[8..16]) as usize;
    let end = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..end])?;
    Ok((header, bytes[end..].to_vec()))
}

/// Little-endian payload writer.
#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian payload reader; every read is bounds-checked.
pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(LittleEndian::read_u32)
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(LittleEndian::read_u64)
    }

    pub fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let s = self.take(n.checked_mul(8)?)?;
        Some(s.chunks_exact(8).map(|c| f64::from_bits(LittleEndian::read_u64(c))).collect())
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}
