//! Checkpoints: magic tag, `u32` header length, JSON header (config, its
//! hash, schedule position, array table, payload digest) and the arrays as
//! one f32 little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::raster::{f32_from_le, split_container};
use crate::train::{NamedArray, StateMeta, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEERCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArrayEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config_hash: String,
    config: TrainConfig,
    meta: StateMeta,
    arrays: Vec<ArrayEntry>,
    payload_sha256: String,
}

/// A training state frozen to disk together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: TrainConfig,
    pub meta: StateMeta,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_state(config: &TrainConfig, config_hash: &str, state: &TrainState) -> Self {
        Checkpoint {
            config_hash: config_hash.to_string(),
            config: config.clone(),
            meta: state.meta(),
            arrays: state.export(),
        }
    }

    /// Rebuilds the training state this checkpoint was taken from.
    pub fn to_state(&self) -> Result<TrainState> {
        TrainState::restore(&self.config, self.meta, self.arrays.clone())
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.0 == name)
    }

    /// Number of stored values of arrays whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.arrays
            .iter()
            .filter(|a| a.0.starts_with(prefix))
            .map(|a| a.2.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload =
            Vec::with_capacity(4 * self.arrays.iter().map(|a| a.2.len()).sum::<usize>());
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, shape, data) in &self.arrays {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "array `{name}` has {} values for shape {shape:?}",
                        data.len()
                    ),
                ));
            }
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            meta: self.meta,
            arrays: entries,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| Error::Invalid(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let (header, payload) = split_container(bytes, CHECKPOINT_MAGIC, path)?;
        let header: Header =
            serde_json::from_slice(header).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {}",
                header.version
            )));
        }
        let expected: usize = header.arrays.iter().map(ArrayEntry::len).sum();
        if payload.len() != 4 * expected {
            return Err(corrupt(format!(
                "payload has {} bytes, array table needs {}",
                payload.len(),
                4 * expected
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload digest mismatch".into()));
        }
        let mut values = f32_from_le(payload).into_iter();
        let arrays = header
            .arrays
            .into_iter()
            .map(|e| {
                let data: Vec<f32> = values.by_ref().take(e.len()).collect();
                (e.name, e.shape, data)
            })
            .collect();
        Ok(Checkpoint {
            config_hash: header.config_hash,
            config: header.config,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn small_state(variant: Variant) -> (TrainConfig, TrainState) {
        let mut model = ModelConfig::new(16, 6, variant);
        model.unet_filters = 2;
        let mut cfg = TrainConfig::new(model);
        cfg.ssim.window = 5;
        let state = TrainState::new(&cfg).unwrap();
        (cfg, state)
    }

    #[test]
    fn round_trip_restores_identical_state() {
        let (cfg, state) = small_state(Variant::Deer);
        let ck = Checkpoint::from_state(&cfg, "abc", &state);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_state().unwrap();
        assert_eq!(restored.export(), state.export());
        assert_eq!(restored.meta(), state.meta());
    }

    #[test]
    fn parameter_counts_are_visible() {
        let (cfg, state) = small_state(Variant::Deer);
        let ck = Checkpoint::from_state(&cfg, "", &state);
        assert_eq!(ck.array("bp.weights").unwrap().1, vec![6, 16, 16]);
        let (cfg, state) = small_state(Variant::DeerLite);
        let ck = Checkpoint::from_state(&cfg, "", &state);
        assert_eq!(ck.array("bp.weights").unwrap().2.len(), 16);
    }

    #[test]
    fn damaged_checkpoints_are_refused() {
        let (cfg, state) = small_state(Variant::DeerNowgan);
        let bytes = Checkpoint::from_state(&cfg, "h", &state)
            .to_bytes()
            .unwrap();
        let p = Path::new("ck");
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, p),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8], p),
            Err(Error::Corrupt { .. })
        ));
        let mut magic = bytes.clone();
        magic[..8].copy_from_slice(b"DEERRAST");
        assert!(matches!(
            Checkpoint::from_bytes(&magic, p),
            Err(Error::Corrupt { .. })
        ));
    }
}
