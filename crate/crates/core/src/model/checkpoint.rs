//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DSNTCKPT"
//! version   u32
//! hlen      u64      length of the JSON header
//! header    hlen bytes of UTF-8 JSON
//! payload   f64 values, for every store and parameter in header order:
//!           value, first moment, second moment
//! ```
//!
//! The header holds free-form metadata plus, per store, each parameter's
//! name, shape and optimizer step count.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{Param, ParamStore};

pub const MAGIC: &[u8; 8] = b"DSNTCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    name: String,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    stores: Vec<StoreHeader>,
}

/// Named parameter stores plus JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub stores: Vec<(String, ParamStore)>,
}

impl Checkpoint {
    pub fn store(&self, name: &str) -> Result<&ParamStore> {
        self.stores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no store {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            stores: self
                .stores
                .iter()
                .map(|(name, s)| StoreHeader {
                    name: name.clone(),
                    params: s
                        .iter()
                        .map(|p| ParamHeader {
                            name: p.name.clone(),
                            shape: p.value.shape().to_vec(),
                            step: p.step,
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
            context: "checkpoint header".into(),
            source: e,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, s) in &self.stores {
            for p in s.iter() {
                for t in [&p.value, &p.m, &p.v] {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Incompatible(format!("not a checkpoint: {why}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Incompatible(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Json {
            context: "checkpoint header".into(),
            source: e,
        })?;
        let mut pos = 20 + hlen;
        let mut read = |n: usize| -> Result<Vec<f64>> {
            let chunk = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated payload"))?;
            pos += 8 * n;
            Ok(chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut stores = Vec::new();
        for sh in header.stores {
            let mut store = ParamStore::new();
            for ph in sh.params {
                let n: usize = ph.shape.iter().product();
                let value = Tensor::new(&ph.shape, read(n)?)?;
                let m = Tensor::new(&ph.shape, read(n)?)?;
                let v = Tensor::new(&ph.shape, read(n)?)?;
                store.restore(Param {
                    name: ph.name,
                    value,
                    grad: None,
                    m,
                    v,
                    step: ph.step,
                })?;
            }
            stores.push((sh.name, store));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            meta: header.meta,
            stores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
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
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(&[2, 2], vec![0.1, -3.5e-300, f64::MAX, 1.0 / 3.0]).unwrap()).unwrap();
        s.insert("b", Tensor::from_vec(vec![7.0])).unwrap();
        s.param_mut("a").unwrap().grad = Some(Tensor::new(&[2, 2], vec![0.3, 0.1, -0.2, 1e-7]).unwrap());
        s.adam_step(&Default::default()).unwrap();
        let ck = Checkpoint {
            meta: serde_json::json!({"step": 3}),
            stores: vec![("model".into(), s.clone()), ("empty".into(), ParamStore::new())],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.store("model").unwrap().param("a").unwrap().step, 1);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(Error::Incompatible(_))));
        let ck = Checkpoint {
            meta: serde_json::Value::Null,
            stores: vec![],
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Incompatible(_))));
    }
}
