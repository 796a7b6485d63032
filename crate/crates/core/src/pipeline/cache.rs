//! Reconstruction codes keyed by image content, generator and options.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};

use crate::backend::{FeatureExtractor, Generator};
use crate::embed::{embed_wplus, refine_fs, EmbedOptions};
use crate::error::Result;
use crate::image::Image;
use crate::latent::{load_code, save_code, FSCode, LatentCode, WPlusCode};
use crate::progress::{LossTrace, Progress};

#[derive(Clone, Debug)]
pub struct CachedEmbedding {
    pub wplus: WPlusCode,
    pub fs: FSCode,
    pub wplus_trace: LossTrace,
    pub fs_trace: LossTrace,
}

/// In-memory map with an optional on-disk mirror. Lookups take a shared
/// lock; inserts and file writes are serialized.
#[derive(Default)]
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<String, Arc<CachedEmbedding>>>,
    writer: std::sync::Mutex<()>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    pub fn key(img: &Image, gen: &dyn Generator, ex: &dyn FeatureExtractor, m: usize, opts: &EmbedOptions) -> String {
        let mut h = Sha256::new();
        h.update(img.content_hash().as_bytes());
        h.update(gen.fingerprint().as_bytes());
        h.update(ex.fingerprint().as_bytes());
        h.update((m as u64).to_le_bytes());
        h.update(serde_json::to_vec(opts).expect("options serialize"));
        hex::encode(h.finalize())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn paths(dir: &Path, key: &str) -> [PathBuf; 3] {
        [
            dir.join(format!("{key}.wplus.bin")),
            dir.join(format!("{key}.fs.bin")),
            dir.join(format!("{key}.traces.json")),
        ]
    }

    fn load_from_disk(&self, key: &str, gen: &dyn Generator) -> Option<CachedEmbedding> {
        let [wp, fp, tp] = Self::paths(self.dir.as_ref()?, key);
        if !(wp.exists() && fp.exists() && tp.exists()) {
            return None;
        }
        let read = || -> Result<CachedEmbedding> {
            let wplus = match load_code(&wp, Some(gen))? {
                LatentCode::WPlus(w) => w,
                LatentCode::FS(_) => return Err(crate::Error::Config("expected a W+ code".into())),
            };
            let fs = match load_code(&fp, Some(gen))? {
                LatentCode::FS(f) => f,
                LatentCode::WPlus(_) => return Err(crate::Error::Config("expected an FS code".into())),
            };
            let (wplus_trace, fs_trace) = serde_json::from_slice(&std::fs::read(&tp)?)?;
            Ok(CachedEmbedding {
                wplus,
                fs,
                wplus_trace,
                fs_trace,
            })
        };
        match read() {
            Ok(e) => Some(e),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {key}: {e}");
                None
            }
        }
    }

    fn store(&self, key: &str, gen: &dyn Generator, e: &Arc<CachedEmbedding>) -> Result<()> {
        let _guard = self.writer.lock().unwrap();
        if let Some(dir) = &self.dir {
            let [wp, fp, tp] = Self::paths(dir, key);
            save_code(&LatentCode::WPlus(e.wplus.clone()), gen.fingerprint(), &wp)?;
            save_code(&LatentCode::FS(e.fs.clone()), gen.fingerprint(), &fp)?;
            let tmp = tp.with_extension("json.tmp");
            std::fs::write(&tmp, serde_json::to_vec(&(&e.wplus_trace, &e.fs_trace))?)?;
            std::fs::rename(&tmp, &tp)?;
        }
        self.entries.write().unwrap().insert(key.to_string(), e.clone());
        Ok(())
    }

    /// Returns the cached embedding of `img`, computing and storing it on a
    /// miss. The flag reports whether it was a hit.
    pub fn get_or_embed(
        &self,
        gen: &dyn Generator,
        ex: &dyn FeatureExtractor,
        img: &Image,
        m: usize,
        opts: &EmbedOptions,
        progress: &dyn Progress,
    ) -> Result<(Arc<CachedEmbedding>, bool)> {
        let key = Self::key(img, gen, ex, m, opts);
        if let Some(e) = self.entries.read().unwrap().get(&key) {
            return Ok((e.clone(), true));
        }
        if let Some(e) = self.load_from_disk(&key, gen) {
            let e = Arc::new(e);
            self.entries.write().unwrap().insert(key, e.clone());
            return Ok((e, true));
        }
        let w = embed_wplus(gen, ex, img, opts, progress)?;
        let fs = refine_fs(gen, ex, img, &w.code, m, opts, progress)?;
        let e = Arc::new(CachedEmbedding {
            wplus: w.code,
            fs: fs.code,
            wplus_trace: w.trace,
            fs_trace: fs.trace,
        });
        self.store(&key, gen, &e)?;
        Ok((e, false))
    }
}
