// SPDX-License-Identifier: MIT OR Apache-2.0

//! `CLM1` tensor container.
//!
//! ```text
//! "CLM1" | u64 LE header length | UTF-8 JSON header | f32 LE payloads
//! ```
//!
//! The header carries `kind`, free-form `config` and `meta` objects, and a
//! tensor manifest of `{name, shape, offset}` where `offset` is the byte
//! offset of the tensor inside the payload section. Payloads appear in
//! manifest order with no padding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CloomError, Result};
use crate::numeric::Tensor;

pub const MAGIC: [u8; 4] = *b"CLM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
}

/// Decoded container: header plus tensors in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut manifest = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: manifest,
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + hjson.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(CloomError::BadMagic {
                expected: MAGIC,
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < 12 {
            return Err(CloomError::Truncated("missing header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let hend = 12usize
            .checked_add(hlen)
            .ok_or_else(|| CloomError::Truncated("header length overflows".into()))?;
        if bytes.len() < hend {
            return Err(CloomError::Truncated(format!(
                "header declares {hlen} bytes, only {} available",
                bytes.len() - 12
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[12..hend])
            .map_err(|e| CloomError::Format(format!("header is not valid JSON: {e}")))?;
        let payload = &bytes[hend..];
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (i, entry) in header.tensors.iter().enumerate() {
            let n: usize = entry.shape.iter().product();
            if entry.offset != expected_offset {
                return Err(CloomError::ManifestMismatch {
                    name: entry.name.clone(),
                    detail: format!("offset {} but previous tensors end at {expected_offset}", entry.offset),
                });
            }
            let next = header
                .tensors
                .get(i + 1)
                .map(|e| e.offset)
                .unwrap_or(payload.len() as u64);
            let span = next.saturating_sub(entry.offset);
            if span != 4 * n as u64 {
                if i + 1 == header.tensors.len() && (payload.len() as u64) < entry.offset + 4 * n as u64 {
                    return Err(CloomError::Truncated(format!(
                        "payload for `{}` needs {} bytes, {} remain",
                        entry.name,
                        4 * n,
                        span
                    )));
                }
                return Err(CloomError::ManifestMismatch {
                    name: entry.name.clone(),
                    detail: format!("shape {:?} has {n} values but payload span is {span} bytes", entry.shape),
                });
            }
            let start = entry.offset as usize;
            let data: Vec<f32> = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| CloomError::ManifestMismatch {
                name: entry.name.clone(),
                detail: e.to_string(),
            })?;
            tensors.push((entry.name.clone(), t));
            expected_offset += 4 * n as u64;
        }
        if expected_offset != payload.len() as u64 {
            return Err(CloomError::ManifestMismatch {
                name: "<payload>".into(),
                detail: format!(
                    "manifest covers {expected_offset} bytes, payload has {}",
                    payload.len()
                ),
            });
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CloomError::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| CloomError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CloomError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(CloomError::Format(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CloomError::Format(format!("container has no tensor `{name}`")))?;
        Ok(self.tensors.remove(i).1)
    }
}

/// Hex SHA-256 of a byte string; used to identify artifacts.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
