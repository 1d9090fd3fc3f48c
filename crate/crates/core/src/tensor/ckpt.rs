//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `b"ckpt/1\n"`, `u64` metadata length, metadata JSON bytes, `u64` tensor
//! count, then per tensor: `u32` name length, UTF-8 name, `u32` rank, `u64`
//! per dimension, and the `f64` values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::params::{ParamStore, ParamTensor};

pub const MAGIC: &[u8] = b"ckpt/1\n";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a ckpt/1 file")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

pub fn write_to(w: &mut impl Write, store: &ParamStore, meta: &serde_json::Value) -> Result<(), CkptError> {
    w.write_all(MAGIC)?;
    let meta = serde_json::to_vec(meta)?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * p.data.len());
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CkptError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CkptError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: u64, what: &str) -> Result<Vec<u8>, CkptError> {
    let mut buf = Vec::new();
    let got = r.take(n).read_to_end(&mut buf)?;
    if got as u64 != n {
        return Err(CkptError::Malformed(format!("truncated {what}")));
    }
    Ok(buf)
}

pub fn read_from(r: &mut impl Read) -> Result<(ParamStore, serde_json::Value), CkptError> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| CkptError::BadMagic)?;
    if magic != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let meta_len = read_u64(r)?;
    let meta: serde_json::Value = serde_json::from_slice(&read_bytes(r, meta_len, "metadata")?)?;
    let count = read_u64(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)?;
        let name = String::from_utf8(read_bytes(r, name_len as u64, "name")?)
            .map_err(|_| CkptError::Malformed("name is not UTF-8".into()))?;
        let rank = read_u32(r)?;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = read_bytes(r, 8 * n as u64, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let p = ParamTensor::new(&shape, data).map_err(|e| CkptError::Malformed(e.to_string()))?;
        store.insert(name, p);
    }
    Ok((store, meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<(), CkptError> {
    let mut buf = Vec::new();
    write_to(&mut buf, store, meta)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value), CkptError> {
    let bytes = fs::read(path)?;
    read_from(&mut bytes.as_slice())
}
