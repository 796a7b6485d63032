//! Label masks on disk: 8-bit single-channel PNG (pixel value = label)
//! with a JSON sidecar naming the labels.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use super::{LabelGrid, SemanticMask, TargetMask, UNCOVERED};
use crate::error::{Error, Result};

/// Index → name table stored next to a mask PNG.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable {
    pub labels: BTreeMap<u8, String>,
    /// Sentinel for pixels no reference claimed, if the mask may contain any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncovered: Option<u8>,
}

impl LabelTable {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        Self {
            labels: names
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u8, n.as_ref().to_string()))
                .collect(),
            uncovered: None,
        }
    }

    /// Names `0..num_classes` as `class_<i>` when no better names are known.
    pub fn generic(num_classes: usize) -> Self {
        let names: Vec<String> = (0..num_classes).map(|i| format!("class_{i}")).collect();
        Self::from_names(&names)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.keys().next_back().map(|&k| k as usize + 1).unwrap_or(0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// `mask.png` → `mask.json`.
pub fn sidecar_path(png: impl AsRef<Path>) -> PathBuf {
    png.as_ref().with_extension("json")
}

pub fn encode_label_png(height: usize, width: usize, labels: &[u8]) -> Result<Vec<u8>> {
    let img = GrayImage::from_raw(width as u32, height as u32, labels.to_vec())
        .ok_or_else(|| Error::Shape(format!("{} labels for a {height}x{width} mask", labels.len())))?;
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

/// Decodes an 8-bit grayscale PNG into `(height, width, labels)`.
pub fn decode_label_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    match image::load_from_memory_with_format(bytes, ImageFormat::Png)? {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Ok((h as usize, w as usize, g.into_raw()))
        }
        other => Err(Error::Request(format!(
            "label masks must be 8-bit single-channel PNG, got {:?}",
            other.color()
        ))),
    }
}

pub fn save_label_png(path: impl AsRef<Path>, mask: &impl LabelGrid) -> Result<()> {
    std::fs::write(path, encode_label_png(mask.height(), mask.width(), mask.labels())?)?;
    Ok(())
}

pub fn load_label_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    decode_label_png(&std::fs::read(path)?)
}

impl SemanticMask {
    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_label_png(self.height(), self.width(), self.labels())
    }

    pub fn from_png(bytes: &[u8], num_classes: usize) -> Result<Self> {
        let (h, w, labels) = decode_label_png(bytes)?;
        SemanticMask::new(h, w, labels, num_classes)
    }

    /// Writes the PNG and its label-table sidecar.
    pub fn save(&self, path: impl AsRef<Path>, table: &LabelTable) -> Result<()> {
        save_label_png(&path, self)?;
        table.save(sidecar_path(&path))
    }

    /// Reads a PNG; the class count comes from the sidecar when present,
    /// otherwise from `default_classes`.
    pub fn load(path: impl AsRef<Path>, default_classes: usize) -> Result<Self> {
        let side = sidecar_path(&path);
        let classes = if side.exists() {
            LabelTable::load(side)?.num_classes()
        } else {
            default_classes
        };
        let (h, w, labels) = load_label_png(path)?;
        SemanticMask::new(h, w, labels, classes)
    }
}

impl TargetMask {
    pub fn labels_png(&self) -> Result<Vec<u8>> {
        encode_label_png(self.height(), self.width(), self.labels())
    }

    /// Provenance as a label PNG: reference index, or 255 for inpainted.
    pub fn provenance_png(&self) -> Result<Vec<u8>> {
        encode_label_png(self.height(), self.width(), &self.provenance_bytes())
    }

    /// Rebuilds a target mask from its label and provenance PNGs.
    pub fn from_pngs(labels: &[u8], provenance: &[u8], num_classes: usize) -> Result<Self> {
        let (h, w, l) = decode_label_png(labels)?;
        let (ph, pw, p) = decode_label_png(provenance)?;
        if (ph, pw) != (h, w) {
            return Err(Error::Shape(format!(
                "provenance {ph}x{pw} does not match labels {h}x{w}"
            )));
        }
        TargetMask::new(
            h,
            w,
            l,
            p.into_iter().map(super::Provenance::from_byte).collect(),
            num_classes,
        )
    }

    pub fn label_table(names: &[&str]) -> LabelTable {
        let mut t = LabelTable::from_names(names);
        t.uncovered = Some(UNCOVERED);
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{build_target_mask, RegionSpec};

    #[test]
    fn png_round_trip_is_bit_exact() {
        let labels: Vec<u8> = (0..48).map(|i| (i * 7 % 19) as u8).collect();
        let m = SemanticMask::new(6, 8, labels, 19).unwrap();
        let back = SemanticMask::from_png(&m.to_png().unwrap(), 19).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rgb_png_is_rejected() {
        let rgb = crate::image::Image::constant(2, 2, 0.0).encode_png().unwrap();
        assert!(decode_label_png(&rgb).is_err());
    }

    #[test]
    fn sidecar_sets_class_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = SemanticMask::new(1, 2, vec![0, 2], 3).unwrap();
        m.save(&path, &LabelTable::from_names(&["background", "face", "hair"]))
            .unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.json")).unwrap();
        assert!(text.contains("\"2\": \"hair\""));
        assert_eq!(SemanticMask::load(&path, 19).unwrap(), m);
    }

    #[test]
    fn target_mask_pngs_round_trip() {
        let a = SemanticMask::new(1, 3, vec![1, 1, 0], 3).unwrap();
        let b = SemanticMask::new(1, 3, vec![2, 0, 0], 3).unwrap();
        let t = build_target_mask(&[a, b], &[RegionSpec::new(0, [1]), RegionSpec::new(1, [2])]).unwrap();
        let back = TargetMask::from_pngs(&t.labels_png().unwrap(), &t.provenance_png().unwrap(), 3).unwrap();
        assert_eq!(back, t);
    }
}
