//! Single-file checkpoints: a magic tag, a length-prefixed JSON header and
//! raw little-endian `f32` payloads in manifest order.

use std::collections::HashSet;
use std::path::Path;

use dewm_autograd::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{make_variant, ModelBundle};
use crate::params::{ParamKind, ParamStore};

const MAGIC: &[u8; 8] = b"DEWMCK01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    kind: ParamKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    parameters: Vec<ManifestEntry>,
    rng_state: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub bundle: ModelBundle,
    /// Opaque generator state; see [`rng_state_bytes`].
    pub rng_state: Vec<u8>,
}

/// Seed, stream and word position of a ChaCha generator (56 bytes).
pub fn rng_state_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

/// Inverse of [`rng_state_bytes`].
pub fn rng_from_state(bytes: &[u8]) -> Option<ChaCha8Rng> {
    use rand::SeedableRng;
    if bytes.len() != 56 {
        return None;
    }
    let seed: [u8; 32] = bytes[..32].try_into().ok()?;
    let stream = u64::from_le_bytes(bytes[32..40].try_into().ok()?);
    let pos = u128::from_le_bytes(bytes[40..56].try_into().ok()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Some(rng)
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(text: &str) -> Option<Vec<u8>> {
    if !text.len().is_multiple_of(2) {
        return None;
    }
    (0..text.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(text.get(i..i + 2)?, 16).ok())
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let parameters = self
            .bundle
            .params
            .iter()
            .map(|(name, e)| ManifestEntry {
                name: name.to_string(),
                shape: e.value.shape().to_vec(),
                dtype: "f32".into(),
                kind: e.kind,
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            parameters,
            rng_state: to_hex(&self.rng_state),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, e) in self.bundle.params.iter() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint and checks that its parameter set is exactly the
    /// one the stored config builds. `path` is used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::checkpoint(path, reason);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let template = make_variant(&header.config).map_err(|e| bad(format!("config: {e}")))?;
        let expected: HashSet<&str> = template.params.names().collect();
        let present: HashSet<&str> = header.parameters.iter().map(|p| p.name.as_str()).collect();
        if expected != present || present.len() != header.parameters.len() {
            return Err(bad("parameter names do not match the architecture".into()));
        }
        let mut params = ParamStore::new();
        let mut offset = 16 + header_len;
        for entry in &header.parameters {
            let want = template.params.get(&entry.name)?.shape();
            if entry.shape != want {
                return Err(bad(format!("{}: shape {:?}, expected {want:?}", entry.name, entry.shape)));
            }
            if entry.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(format!("{}: truncated payload", entry.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?, entry.kind);
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after payload".into()));
        }
        let rng_state = from_hex(&header.rng_state).ok_or_else(|| bad("rng_state is not hex".into()))?;
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            bundle: ModelBundle {
                arch: template.arch,
                params,
            },
            rng_state,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }
}
