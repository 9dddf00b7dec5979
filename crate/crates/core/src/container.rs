// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary tensor container shared by model, lens and basis files.
//!
//! Layout: `b"TLNS"`, format version (`u32` LE), header length (`u32` LE),
//! UTF-8 JSON header, then the little-endian `f32` payload. The header
//! holds free-form metadata and a directory of
//! `{name, dtype, shape, offset}` entries, with offsets in bytes from the
//! start of the payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TLNS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: Map<String, Value>,
    tensors: Vec<Entry>,
}

/// In-memory container: metadata plus named `f32` tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Map<String, Value>,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta_as<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing header field {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.shape())
    }

    /// Fetch a tensor, checking its shape.
    pub fn get<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let (_, t) = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "tensor {name}: stored {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.cast())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0usize;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                dtype: "f32".to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * 4;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Format("header larger than 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing TLNS magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let payload_start = 12 + header_len;
        if bytes.len() < payload_start {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0usize;
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("tensor {}: dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + 4 * n > payload.len() {
                return Err(Error::Format(format!("tensor {}: bad offset", e.name)));
            }
            let data = payload[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset += 4 * n;
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        if expected_offset != payload.len() {
            return Err(Error::Format("trailing payload bytes".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut c = Container::new();
        c.set_meta("kind", "test").unwrap();
        c.set_meta("eps", 1e-5).unwrap();
        c.push("a", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.1));
        c.push("b", &Tensor::<f64>::vector(vec![f64::MIN_POSITIVE, -0.0]));
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta_as::<f64>("eps").unwrap(), 1e-5);
        assert!(back.get::<f32>("a", &[3, 2]).is_err());
        assert!(back.get::<f32>("missing", &[1]).is_err());
    }

    #[test]
    fn rejects_corruption() {
        assert!(Container::from_bytes(b"NOPE").is_err());
        let mut c = Container::new();
        c.push("a", &Tensor::<f32>::zeros(&[4]));
        let mut bytes = c.to_bytes().unwrap();
        bytes.pop();
        assert!(Container::from_bytes(&bytes).is_err());
    }
}
