//! Versioned parameter container.
//!
//! Layout: `b"RTCK"`, u32 version, u64 header length, UTF-8 JSON header,
//! then every tensor's values as little-endian f64 in header order. The
//! header records the kind, a free-form config and meta object, and for each
//! tensor its set, name and shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    /// Named parameter sets in a fixed order.
    pub sets: Vec<(String, ParamSet)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    set: String,
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize) -> Self {
        Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config).expect("config is serializable"),
            meta: serde_json::Value::Null,
            sets: Vec::new(),
        }
    }

    pub fn with_set(mut self, name: &str, set: ParamSet) -> Self {
        self.sets.push((name.to_string(), set));
        self
    }

    pub fn set(&self, name: &str) -> Result<&ParamSet> {
        self.sets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::format("sets", format!("checkpoint has no parameter set {:?}", name)))
    }

    pub fn take_set(&mut self, name: &str) -> Result<ParamSet> {
        let pos = self
            .sets
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format("sets", format!("checkpoint has no parameter set {:?}", name)))?;
        Ok(self.sets.remove(pos).1)
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::format(
                "kind",
                format!("expected a {} checkpoint, found {}", kind, self.kind),
            ))
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .sets
                .iter()
                .flat_map(|(set, p)| {
                    p.iter().map(move |(name, t)| TensorHeader {
                        set: set.clone(),
                        name: name.to_string(),
                        shape: t.shape.clone(),
                    })
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header is serializable");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in &self.sets {
            for (_, t) in p.iter() {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("version", format!("unsupported version {}", version)));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("header", "header length exceeds file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::format("header", e.to_string()))?;
        let mut at = hend;
        let mut sets: Vec<(String, ParamSet)> = Vec::new();
        for th in header.tensors {
            let n = th
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("tensors", "shape overflows"))?;
            let end = n
                .checked_mul(8)
                .and_then(|b| b.checked_add(at))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::format("length", format!("tensor {} is truncated", th.name)))?;
            let data = bytes[at..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at = end;
            if sets.last().map(|(s, _)| s != &th.set).unwrap_or(true) {
                sets.push((th.set.clone(), ParamSet::new()));
            }
            let set = &mut sets.last_mut().unwrap().1;
            if set.index_of(&th.name).is_some() {
                return Err(Error::format("tensors", format!("duplicate tensor {}", th.name)));
            }
            set.push(th.name, Tensor::new(th.shape, data));
        }
        if at != bytes.len() {
            return Err(Error::format("length", "trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            sets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
