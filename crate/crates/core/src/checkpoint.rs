//! Binary container for named parameter tensors.
//!
//! Layout: 8-byte magic, little-endian `u32` manifest length, a JSON
//! manifest, then the payload of little-endian `f64` values. The manifest
//! lists each tensor's name, shape and byte offset and carries the SHA-256
//! of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"PILOTCK1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
    pub payload_bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(params: ParamSet) -> Self {
        Self { meta: BTreeMap::new(), params }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn manifest(&self) -> Manifest {
        build(self).0
    }

    pub fn encode(&self) -> Vec<u8> {
        let (manifest, payload) = build(self);
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = split(bytes)?;
        let mut params = ParamSet::new();
        for e in &manifest.entries {
            let count: usize = e.shape.iter().product();
            let end = e.offset + count * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("entry {} runs past the payload", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| Error::Checkpoint(format!("entry {}: {err}", e.name)))?;
            if params.insert(e.name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry {}", e.name)));
            }
        }
        let ck = Self { meta: manifest.meta, params };
        // anything that does not re-encode identically is not a file we wrote
        if ck.encode() != bytes {
            return Err(Error::Checkpoint("container is not in canonical form".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<usize> {
        let bytes = self.encode();
        std::fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Manifest of a container without decoding its tensors.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    Ok(split(bytes)?.0)
}

/// Size in bytes of the encoded container for `params` and `meta`.
pub fn encoded_len(ck: &Checkpoint) -> usize {
    ck.encode().len()
}

fn build(ck: &Checkpoint) -> (Manifest, Vec<u8>) {
    let mut payload = Vec::with_capacity(ck.params.num_scalars() * 8);
    let mut entries = Vec::with_capacity(ck.params.len());
    for (name, t) in ck.params.iter() {
        entries.push(ManifestEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: payload.len() });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        meta: ck.meta.clone(),
        entries,
        payload_bytes: payload.len(),
        sha256: hex_digest(&payload),
    };
    (manifest, payload)
}

fn split(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing container magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if len > body.len() {
        return Err(Error::Checkpoint("manifest length exceeds file size".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    let payload = &body[len..];
    if payload.len() != manifest.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if hex_digest(payload) != manifest.sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    Ok((manifest, payload))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::vector(vec![1.5, -0.0, f64::MIN_POSITIVE]));
        p.insert("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 1e-300]]).unwrap());
        Checkpoint::new(p).with_meta("round", 2).with_meta("role", "server")
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        // -0.0 survives bit-for-bit
        assert_eq!(back.params.get("b").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn manifest_offsets_follow_name_order() {
        let m = sample().manifest();
        assert_eq!(m.entries[0].name, "a");
        assert_eq!(m.entries[1].offset, 32);
        assert_eq!(m.payload_bytes, 7 * 8);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::decode(b"PILOTCK1").is_err());
        assert!(Checkpoint::decode(b"not a checkpoint at all").is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample();
        let n = ck.save(&path).unwrap();
        assert_eq!(n, std::fs::metadata(&path).unwrap().len() as usize);
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
