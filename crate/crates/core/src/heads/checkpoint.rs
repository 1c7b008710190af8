use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SituError};
use crate::kernel::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SITUCKPT";

/// A JSON header followed by named f32 tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SituError::Checkpoint(format!("truncated while reading {}", what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(
        header: serde_json::Value,
        names: &[String],
        tensors: &[Tensor<T>],
    ) -> Self {
        Self {
            header,
            tensors: names
                .iter()
                .cloned()
                .zip(tensors.iter().map(|t| t.cast()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| SituError::Checkpoint(format!("header: {}", e)))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(SituError::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let n = r.u32("header length")?;
        let header = serde_json::from_slice(r.take(n, "header")?)
            .map_err(|e| SituError::Checkpoint(format!("header: {}", e)))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| SituError::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.u32(&name)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)?);
            }
            let len: usize = shape.iter().product();
            let bytes = r.take(len * 4, &name)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(SituError::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| SituError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| SituError::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| e.context(path.display().to_string()))
    }

    /// Deserialises one header field.
    pub fn header_field<H: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<H> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| SituError::Checkpoint(format!("header has no {:?}", key)))?;
        serde_json::from_value(v.clone())
            .map_err(|e| SituError::Checkpoint(format!("header field {}: {}", key, e)))
    }
}

/// Helper for building headers from serialisable parts.
pub fn header_value<H: Serialize>(value: &H) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| SituError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let ck = Checkpoint {
            header: serde_json::json!({"a": 1}),
            tensors: vec![
                ("w".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE]).unwrap()),
                ("b".into(), Tensor::vector(vec![0.125])),
            ],
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"SITUCKPT");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
