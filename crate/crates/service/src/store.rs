//! Content-addressed, immutable object store under the data directory.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use maskblend_core::masks::{TargetMask, UNCOVERED};
use maskblend_core::{Image, Result};

pub struct Store {
    root: PathBuf,
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Ids are hex digests; anything else cannot name a stored object.
fn valid_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

/// Write-then-rename so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    let tmp = path.with_extension(format!("tmp{}", uuid::Uuid::new_v4().simple()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["images", "masks", "jobs", "cache"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn job_dir(&self, job_id: &str) -> PathBuf {
        self.root.join("jobs").join(job_id)
    }

    fn image_path(&self, id: &str) -> Option<PathBuf> {
        valid_id(id).then(|| self.root.join("images").join(format!("{id}.png")))
    }

    /// Stores PNG bytes verbatim; the id is their digest.
    pub fn put_image(&self, png: &[u8]) -> Result<String> {
        let id = sha_hex(&[png]);
        write_atomic(&self.image_path(&id).expect("digest is a valid id"), png)?;
        Ok(id)
    }

    pub fn image_bytes(&self, id: &str) -> Option<Vec<u8>> {
        std::fs::read(self.image_path(id)?).ok()
    }

    pub fn has_image(&self, id: &str) -> bool {
        self.image_path(id).is_some_and(|p| p.exists())
    }

    pub fn load_image(&self, id: &str) -> Result<Image> {
        let bytes = self
            .image_bytes(id)
            .ok_or_else(|| maskblend_core::Error::Request(format!("unknown image id {id}")))?;
        Image::decode_png(&bytes)
    }

    fn mask_paths(&self, id: &str) -> Option<[PathBuf; 2]> {
        let dir = self.root.join("masks");
        valid_id(id).then(|| [dir.join(format!("{id}.png")), dir.join(format!("{id}.prov.png"))])
    }

    /// Mask ids cover the parent version as well as the content, so every
    /// edit yields a new version even when the pixels are unchanged.
    pub fn put_mask(&self, mask: &TargetMask, parent: Option<&str>) -> Result<String> {
        let labels = mask.labels_png()?;
        let prov = mask.provenance_png()?;
        let id = sha_hex(&[parent.unwrap_or("").as_bytes(), &labels, &prov]);
        let [lp, pp] = self.mask_paths(&id).expect("digest is a valid id");
        write_atomic(&pp, &prov)?;
        write_atomic(&lp, &labels)?;
        Ok(id)
    }

    pub fn has_mask(&self, id: &str) -> bool {
        self.mask_paths(id).is_some_and(|[l, _]| l.exists())
    }

    pub fn mask_pngs(&self, id: &str) -> Option<(Vec<u8>, Vec<u8>)> {
        let [l, p] = self.mask_paths(id)?;
        Some((std::fs::read(l).ok()?, std::fs::read(p).ok()?))
    }

    pub fn load_mask(&self, id: &str, num_classes: usize) -> Result<TargetMask> {
        let (l, p) = self
            .mask_pngs(id)
            .ok_or_else(|| maskblend_core::Error::Request(format!("unknown mask id {id}")))?;
        TargetMask::from_pngs(&l, &p, num_classes)
    }
}

/// Provenance for an edited label grid: unchanged pixels keep the parent's
/// provenance, uncovered pixels are marked inpainted, and relabeled pixels
/// take the reference that supplied that class elsewhere in the parent.
pub fn edited_provenance(parent: &TargetMask, labels: &[u8]) -> Vec<maskblend_core::masks::Provenance> {
    use maskblend_core::masks::{LabelGrid, Provenance};
    let mut owner = std::collections::HashMap::new();
    for (&l, &p) in parent.labels().iter().zip(parent.provenance()) {
        if let Provenance::Reference(_) = p {
            owner.entry(l).or_insert(p);
        }
    }
    labels
        .iter()
        .zip(parent.labels().iter().zip(parent.provenance()))
        .map(|(&l, (&pl, &pp))| {
            if l == UNCOVERED {
                Provenance::Inpainted
            } else if l == pl {
                pp
            } else {
                owner.get(&l).copied().unwrap_or(Provenance::Inpainted)
            }
        })
        .collect()
}
