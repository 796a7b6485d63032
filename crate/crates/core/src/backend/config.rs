use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::toy::{make_toy_world, ToyWorldConfig};
use super::{Backend, ConvFeatureExtractor, ConvSegmenter, StyleGenerator};
use crate::archive::{Archive, WEIGHTS_MAGIC};
use crate::error::Result;

/// Where the networks come from: a seeded toy world, or three weight
/// archives. Relative archive paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Toy(ToyWorldConfig),
    Archive {
        generator: PathBuf,
        segmenter: PathBuf,
        extractor: PathBuf,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Toy(ToyWorldConfig::default())
    }
}

impl BackendConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: BackendConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        Ok(cfg)
    }

    /// Makes relative weight paths relative to `dir`.
    pub fn resolve_relative(&mut self, dir: &Path) {
        if let BackendConfig::Archive { generator, segmenter, extractor } = self {
            for p in [generator, segmenter, extractor] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
    }

    pub fn load(&self) -> Result<Backend> {
        match self {
            BackendConfig::Toy(cfg) => Ok(make_toy_world(cfg)?.backend()),
            BackendConfig::Archive {
                generator,
                segmenter,
                extractor,
            } => Ok(Backend {
                generator: Arc::new(StyleGenerator::from_archive(Archive::read(
                    generator,
                    &WEIGHTS_MAGIC,
                )?)?),
                segmenter: Arc::new(ConvSegmenter::from_archive(Archive::read(
                    segmenter,
                    &WEIGHTS_MAGIC,
                )?)?),
                extractor: Arc::new(ConvFeatureExtractor::from_archive(Archive::read(
                    extractor,
                    &WEIGHTS_MAGIC,
                )?)?),
            }),
        }
    }
}
