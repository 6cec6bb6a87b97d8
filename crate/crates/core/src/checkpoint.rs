//! Binary checkpoint container.
//!
//! ```text
//! b"MCTFCKPT"            8-byte magic
//! u32 LE                 format version
//! u64 LE                 header length in bytes
//! header                 UTF-8 JSON: kind, config, step, manifest
//! payload                f64 LE values, manifest order
//! ```
//!
//! The manifest lists `{name, shape, crc32}` per tensor. Optimizer moments,
//! when present, follow the parameters as `adam.m/<name>` and `adam.v/<name>`.
//! Writing is deterministic: identical state gives identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MCTFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fusion,
    Gate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    /// Optimizer updates applied so far.
    pub step: u64,
    pub epoch: u64,
    pub manifest: Vec<ManifestEntry>,
    pub has_optimizer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub step: u64,
    pub epoch: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

fn le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn crc(values: &[f64]) -> u32 {
    crc32fast::hash(&le_bytes(values))
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: ModelKind, config: &C, params: ParamStore) -> Result<Self> {
        Ok(Self {
            kind,
            config: serde_json::to_value(config)?,
            step: 0,
            epoch: 0,
            params,
            optimizer: None,
        })
    }

    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config does not match the {:?} layout: {e}", self.kind)))
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = self
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), e.values.as_slice()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (tag, bufs) in [("m", &opt.m), ("v", &opt.v)] {
                for (e, b) in self.params.entries().iter().zip(bufs) {
                    out.push((format!("adam.{tag}/{}", e.name), e.shape.clone(), b.as_slice()));
                }
            }
        }
        out
    }

    pub fn header(&self) -> Header {
        Header {
            kind: self.kind,
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            manifest: self
                .tensors()
                .into_iter()
                .map(|(name, shape, v)| ManifestEntry { name, shape, crc32: crc(v) })
                .collect(),
            has_optimizer: self.optimizer.is_some(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.weight_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, v) in self.tensors() {
            out.extend(le_bytes(v));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split(bytes)?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut off = 0;
        for e in &header.manifest {
            let n: usize = e.shape.iter().product();
            let end = off + 8 * n;
            let chunk = payload
                .get(off..end)
                .ok_or_else(|| Error::Checkpoint(format!("payload truncated at `{}`", e.name)))?;
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if crc(&values) != e.crc32 {
                return Err(Error::Checkpoint(format!("checksum mismatch for `{}`", e.name)));
            }
            off = end;
            if let Some(rest) = e.name.strip_prefix("adam.m/") {
                check_moment(&params, rest, &e.shape)?;
                m.push(values);
            } else if let Some(rest) = e.name.strip_prefix("adam.v/") {
                check_moment(&params, rest, &e.shape)?;
                v.push(values);
            } else {
                params.insert(e.name.clone(), &e.shape, values)?;
            }
        }
        if off != payload.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing payload bytes",
                payload.len() - off
            )));
        }
        let optimizer = header.has_optimizer.then_some(AdamState {
            step: header.step,
            m,
            v,
        });
        if let Some(o) = &optimizer {
            if !o.matches(&params) {
                return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
            }
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            step: header.step,
            epoch: header.epoch,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads and checks kind and parameter layout against `expected`.
    pub fn load_expecting(path: &Path, kind: ModelKind, expected: &ParamStore) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.expect(kind, expected)?;
        Ok(ck)
    }

    pub fn expect(&self, kind: ModelKind, expected: &ParamStore) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        for e in expected.entries() {
            match self.params.get(&e.name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{}`", e.name))),
                Some(got) if got.shape != e.shape => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        e.name, got.shape, e.shape
                    )))
                }
                _ => {}
            }
        }
        if !self.params.same_layout(expected) {
            return Err(Error::Checkpoint("parameter manifest differs from the model layout".into()));
        }
        Ok(())
    }
}

fn check_moment(params: &ParamStore, name: &str, shape: &[usize]) -> Result<()> {
    match params.get(name) {
        Some(e) if e.shape == shape => Ok(()),
        _ => Err(Error::Checkpoint(format!("optimizer moment for unknown parameter `{name}`"))),
    }
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::Checkpoint("header truncated".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    Ok((header, &bytes[20 + len..]))
}

/// Header only, without decoding the payload.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}
