//! Parameter container: magic, architecture hash, named `f64` blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"SPCKPT01";

/// Hex SHA-256 of the architecture kind and its JSON-serialized config.
pub fn config_hash<T: Serialize>(kind: &str, cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(b"\0");
    h.update(json.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_checkpoint(path: &Path, hash: &str, tensors: &[(String, &Mat)]) -> Result<()> {
    let io = |e| Error::io(path, e);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    buf.extend_from_slice(hash.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols as u64).to_le_bytes());
        for v in &m.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::parse(self.path.display().to_string(), "truncated checkpoint"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::parse(self.path.display().to_string(), "non-UTF-8 name"))
    }
}

/// Reads all tensors, refusing files written for a different architecture.
pub fn read_checkpoint(path: &Path, expected_hash: &str) -> Result<Vec<(String, Mat)>> {
    if !path.exists() {
        return Err(Error::MissingAsset(path.to_path_buf()));
    }
    let mut data = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { data: &data, pos: 0, path };
    if c.take(8)? != MAGIC {
        return Err(Error::parse(path.display().to_string(), "not a checkpoint"));
    }
    if c.string()? != expected_hash {
        return Err(Error::ConfigMismatch { path: path.to_path_buf() });
    }
    let n = c.u32()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = c.string()?;
        let rows = c.u64()?;
        let cols = c.u64()?;
        let raw = c.take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Mat::from_vec(rows, cols, values)));
    }
    Ok(out)
}
