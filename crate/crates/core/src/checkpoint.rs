//! Binary checkpoint container shared by every trained module.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON
//! header, then the payload of little-endian `f32` parameter arrays in header
//! order. The header carries the SHA-256 of the payload.

use std::fs;
use std::path::Path;

use eo1_autograd::{ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const MAGIC: &[u8; 8] = b"EO1CKPT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Integrity(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Integrity("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| Error::Integrity(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    step: u64,
    rng: Option<RngState>,
    params: Vec<ParamEntry>,
    payload_sha256: String,
}

/// Named parameters plus the metadata needed to resume or audit a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub rng: Option<RngState>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value, step: u64) -> Self {
        Self { kind: kind.to_string(), config, step, rng: None, params: Vec::new() }
    }

    /// Adds every parameter of `store` under `prefix/`.
    pub fn with_store(mut self, prefix: &str, store: &ParamStore) -> Self {
        for (name, t) in store.iter() {
            self.params.push((format!("{prefix}/{name}"), t.clone()));
        }
        self
    }

    /// Loads the `prefix/` parameters into `store`; every store parameter must be present.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let lead = format!("{prefix}/");
        let named: Vec<(&str, &Tensor)> =
            self.params.iter().filter_map(|(n, t)| n.strip_prefix(&lead).map(|s| (s, t))).collect();
        if named.len() != store.len() {
            return Err(invalid(format!(
                "checkpoint has {} parameters under '{prefix}', model expects {}",
                named.len(),
                store.len()
            )));
        }
        store.load(named)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for (_, t) in &self.params {
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + head.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(Error::Integrity("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::Integrity("checkpoint payload checksum mismatch".into()));
        }
        let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 4 {
            return Err(Error::Integrity("checkpoint payload size mismatch".into()));
        }
        let mut params = Vec::with_capacity(header.params.len());
        let mut off = 0;
        for p in header.params {
            let n: usize = p.shape.iter().product();
            let data = payload[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            off += 4 * n;
            params.push((p.name, Tensor::new(&p.shape, data)?));
        }
        Ok(Self { kind: header.kind, config: header.config, step: header.step, rng: header.rng, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
