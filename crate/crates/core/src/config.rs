//! Run configuration and its stable hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, PretrainOptions};
use crate::cotrain::CoTrainConfig;
use crate::error::{Error, Result};
use crate::synthworld::WorldConfig;

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's Map is ordered by key unless `preserve_order` is enabled.
    let v: serde_json::Value = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn canonical_hash<T: Serialize>(value: &T) -> Result<u64> {
    Ok(fnv1a(canonical_json(value)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub codec: PathBuf,
    pub model: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            codec: "codec.qdvw".into(),
            model: "model.qdvw".into(),
            report: "report.jsonl".into(),
        }
    }
}

/// Everything a pipeline run needs, as one JSON document. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Episodes generated by `gen-data`.
    pub episodes: usize,
    /// Frames drawn from the dataset for codec pretraining.
    pub codec_frames: usize,
    pub world: WorldConfig,
    pub codec: CodecConfig,
    pub pretrain: PretrainOptions,
    pub cotrain: CoTrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 500,
            codec_frames: 1000,
            world: WorldConfig::default(),
            codec: CodecConfig::default(),
            pretrain: PretrainOptions::default(),
            cotrain: CoTrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.codec.validate()?;
        self.cotrain.validate()?;
        if self.episodes == 0 || self.codec_frames == 0 {
            return Err(Error::Config(
                "episodes and codec_frames must be positive".into(),
            ));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<u64> {
        canonical_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "sede": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"codec": {"codebok_size": 3}}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 9, "codec": {"codebook_size": 32}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.codec.codebook_size, 32);
        assert_eq!(c.episodes, RunConfig::default().episodes);
    }

    #[test]
    fn hash_survives_reserialization() {
        let c = RunConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash().unwrap(), c.hash().unwrap());
    }
}
