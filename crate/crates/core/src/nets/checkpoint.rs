//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `RGANCKPT`, `u32` version, 32-byte config
//! digest, `u64` iteration, `u32`-length-prefixed UTF-8 metadata, `u32` array
//! count, then per array: name, dtype tag (`0` = f32, `1` = f64), rank, `u64`
//! dims and raw values.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::{Scalar, Storage};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RGANCKPT";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::STORAGE {
            Storage::F32 => ArrayData::F32(t.data().iter().map(|v| v.real() as f32).collect()),
            Storage::F64 => ArrayData::F64(t.data().iter().map(|v| v.real()).collect()),
        };
        Self { name: name.into(), shape: t.shape().to_vec(), data }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        };
        Tensor::from_vec(&self.shape, data).expect("validated on read")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub iteration: u64,
    /// Free-form text, typically the serialized configuration.
    pub metadata: String,
    pub arrays: Vec<NamedArray>,
}

/// SHA-256 of a configuration text.
pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", reason: reason.into() }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid utf-8"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new(config_text: &str, iteration: u64) -> Self {
        Self {
            config_digest: config_digest(config_text),
            iteration,
            metadata: config_text.to_string(),
            arrays: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.arrays.push(NamedArray::from_tensor(name, t));
    }

    /// Adds every tensor of a store under `prefix.`.
    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}.{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.arrays.iter().any(|a| a.name.starts_with(&p))
    }

    /// Fills a store from arrays saved under `prefix.`.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let p = format!("{prefix}.");
        let named: Vec<(String, Tensor<T>)> = self
            .arrays
            .iter()
            .filter_map(|a| a.name.strip_prefix(&p).map(|n| (n.to_string(), a.to_tensor())))
            .collect();
        store.load(&named)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_str(&mut out, &self.metadata);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.push(match a.data {
                ArrayData::F32(_) => 0,
                ArrayData::F64(_) => 1,
            });
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let iteration = r.u64()?;
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => ArrayData::F32(
                    r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
                ),
                1 => ArrayData::F64(
                    r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
                ),
                t => return Err(bad(format!("unknown dtype tag {t}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config_digest, iteration, metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new("a = 1", 42);
        ck.push("w", &Tensor::from_vec(&[2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-7]).unwrap());
        ck.push("v", &Tensor::from_vec(&[3], vec![std::f64::consts::PI, -1e300, 0.1]).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let w: Tensor<f32> = back.get("w").unwrap().to_tensor();
        assert_eq!(w.data()[2].to_bits(), f32::MIN_POSITIVE.to_bits());
        assert_eq!(back.config_digest, config_digest("a = 1"));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint::new("", 0);
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        bytes[8] = 99;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
    }
}
