//! Per-job directory of intermediate artifacts.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::archive::{Archive, Dtype};
use crate::blend::BlendWeights;
use crate::error::Result;
use crate::image::Image;
use crate::latent::{save_code, LatentCode};
use crate::masks::{save_label_png, sidecar_path, LabelTable, TargetMask, UNCOVERED};

const WEIGHTS_MAGIC: &[u8; 6] = b"BBSBW1";

#[derive(Clone, Debug)]
pub struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// `target_mask.png` (+ sidecar) and `target_provenance.png`.
    pub fn write_target(&self, t: &TargetMask) -> Result<()> {
        let labels = self.path("target_mask.png");
        save_label_png(&labels, t)?;
        let mut table = LabelTable::generic(t.num_classes());
        table.uncovered = Some(UNCOVERED);
        table.save(sidecar_path(&labels))?;
        std::fs::write(self.path("target_provenance.png"), t.provenance_png()?)?;
        Ok(())
    }

    pub fn write_image(&self, name: &str, img: &Image) -> Result<()> {
        img.save_png(self.path(name))
    }

    pub fn write_code(&self, name: &str, code: &LatentCode, fingerprint: &str) -> Result<()> {
        save_code(code, fingerprint, self.path(name))
    }

    pub fn write_weights(&self, w: &BlendWeights) -> Result<()> {
        let mut a = Archive::new(serde_json::json!({ "kind": "blend_weights" }));
        a.push("u", Dtype::F64, w.u.clone());
        a.write(self.path("blend_weights.bin"), WEIGHTS_MAGIC)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        std::fs::write(self.path(name), serde_json::to_vec_pretty(value)?)?;
        Ok(())
    }
}
