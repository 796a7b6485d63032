//! W+ and FS latent codes, conversions, structure transfer and code files.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::json;

use crate::archive::{Archive, Dtype, CODE_MAGIC};
use crate::backend::{synth_full, synth_prefix, synth_suffix, Generator};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::masks::{region_indicator_set, resample_mask, SemanticMask, SoftRegionMask, TargetMask};
use crate::tensor::Tensor;

/// One style vector per generator block.
#[derive(Clone, Debug, PartialEq)]
pub struct WPlusCode {
    pub w: Tensor,
}

impl WPlusCode {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::Shape(format!("W+ code must be rank 2, got {:?}", w.shape())));
        }
        if !w.all_finite() {
            return Err(Error::Shape("W+ code has non-finite entries".into()));
        }
        Ok(Self { w })
    }

    /// Every row set to the generator's mean latent.
    pub fn mean(gen: &dyn Generator) -> Self {
        let d = gen.style_dim();
        let row = gen.mean_latent().data();
        let data = (0..gen.num_style_blocks()).flat_map(|_| row.iter().copied()).collect();
        Self {
            w: Tensor::from_parts(vec![gen.num_style_blocks(), d], data),
        }
    }

    pub fn synth(&self, gen: &dyn Generator) -> Result<Image> {
        synth_full(gen, &self.w)
    }
}

/// Structure tensor `f` at block `m` plus appearance code `s` for the
/// remaining blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct FSCode {
    pub f: Tensor,
    pub s: Tensor,
    pub m: usize,
    pub generator_fingerprint: String,
}

impl FSCode {
    /// Checks shapes and fingerprint against `gen`.
    pub fn validate(&self, gen: &dyn Generator) -> Result<()> {
        if self.generator_fingerprint != gen.fingerprint() {
            return Err(Error::Fingerprint {
                expected: self.generator_fingerprint.clone(),
                found: gen.fingerprint().to_string(),
            });
        }
        crate::backend::check_split(gen, self.m)?;
        let want = gen.block_shapes()[self.m];
        if self.f.shape() != want.dims() {
            return Err(Error::Dimension {
                block: format!("structure tensor at block {}", self.m),
                expected: want.to_string(),
                got: format!("{:?}", self.f.shape()),
            });
        }
        let rows = gen.num_style_blocks() - self.m;
        if self.s.shape() != [rows, gen.style_dim()] {
            return Err(Error::Dimension {
                block: "appearance code".into(),
                expected: format!("[{rows}, {}]", gen.style_dim()),
                got: format!("{:?}", self.s.shape()),
            });
        }
        Ok(())
    }

    pub fn synth(&self, gen: &dyn Generator) -> Result<Image> {
        self.validate(gen)?;
        synth_suffix(gen, &self.f, &self.s)
    }
}

/// `F = G_m(w)`, `S = w[m..]`.
pub fn fs_from_wplus(gen: &dyn Generator, w: &WPlusCode, m: usize) -> Result<FSCode> {
    let f = synth_prefix(gen, &w.w, m)?;
    Ok(FSCode {
        f,
        s: w.w.rows(m..gen.num_style_blocks())?,
        m,
        generator_fingerprint: gen.fingerprint().to_string(),
    })
}

/// Per-site convex mix `a·x + (1 − a)·y` of two `(C, H, W)` grids with an
/// `(H, W)` weight. Sites with weight exactly 1 or 0 copy the corresponding
/// input verbatim.
pub fn mix_grids(weight: &SoftRegionMask, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() || x.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "cannot mix grids {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if (weight.height(), weight.width()) != (h, w) {
        return Err(Error::Dimension {
            block: "structure mask".into(),
            expected: format!("{h}x{w}"),
            got: format!("{}x{}", weight.height(), weight.width()),
        });
    }
    let hw = h * w;
    let a = weight.values();
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .enumerate()
        .map(|(i, (&xv, &yv))| match a[i % hw] {
            t if t == 1.0 => xv,
            t if t == 0.0 => yv,
            t => t * xv + (1.0 - t) * yv,
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Structure of reference `k` after alignment: its reconstruction
/// structure is kept where both the target mask and its own mask give the
/// region to `classes`, and the aligned code's structure is used elsewhere.
/// Both masks are indicated at image resolution and bicubic-resampled to
/// the block grid.
#[allow(clippy::too_many_arguments)]
pub fn transfer_structure(
    gen: &dyn Generator,
    f_rec: &Tensor,
    w_align: &WPlusCode,
    target: &TargetMask,
    own_mask: &SemanticMask,
    classes: &BTreeSet<u8>,
    m: usize,
) -> Result<Tensor> {
    use crate::masks::LabelGrid;
    if (target.height(), target.width()) != (own_mask.height(), own_mask.width()) {
        return Err(Error::Shape(format!(
            "target mask {}x{} and reference mask {}x{} differ",
            target.height(),
            target.width(),
            own_mask.height(),
            own_mask.width()
        )));
    }
    let shape = gen.block_shapes()[m];
    let alpha = resample_mask(&region_indicator_set(target, classes), shape.height, shape.width);
    let beta = resample_mask(&region_indicator_set(own_mask, classes), shape.height, shape.width);
    let g_align = synth_prefix(gen, &w_align.w, m)?;
    mix_grids(&alpha.product(&beta)?, f_rec, &g_align)
}

/// A code file's contents.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentCode {
    WPlus(WPlusCode),
    FS(FSCode),
}

/// Writes a code with the generator fingerprint it belongs to. Entries
/// are stored as f64 so codes round-trip bit-exactly.
pub fn save_code(code: &LatentCode, gen_fingerprint: &str, path: impl AsRef<Path>) -> Result<()> {
    code_archive(code, gen_fingerprint).write(path, &CODE_MAGIC)
}

pub fn code_archive(code: &LatentCode, gen_fingerprint: &str) -> Archive {
    match code {
        LatentCode::WPlus(c) => {
            let mut ar = Archive::new(json!({
                "kind": "wplus",
                "generator_fingerprint": gen_fingerprint,
            }));
            ar.push("w", Dtype::F64, c.w.clone());
            ar
        }
        LatentCode::FS(c) => {
            let mut ar = Archive::new(json!({
                "kind": "fs",
                "m": c.m,
                "generator_fingerprint": c.generator_fingerprint,
            }));
            ar.push("F", Dtype::F64, c.f.clone());
            ar.push("S", Dtype::F64, c.s.clone());
            ar
        }
    }
}

/// Reads a code file. With `gen`, the stored fingerprint must match and
/// shapes are checked.
pub fn load_code(path: impl AsRef<Path>, gen: Option<&dyn Generator>) -> Result<LatentCode> {
    let path = path.as_ref();
    let ar = Archive::read(path, &CODE_MAGIC)?;
    let corrupt = |reason: &str| Error::Archive {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let fingerprint = ar
        .metadata
        .get("generator_fingerprint")
        .and_then(|v| v.as_str())
        .ok_or_else(|| corrupt("missing generator_fingerprint"))?
        .to_string();
    if let Some(g) = gen {
        if g.fingerprint() != fingerprint {
            return Err(Error::Fingerprint {
                expected: fingerprint,
                found: g.fingerprint().to_string(),
            });
        }
    }
    let code = match ar.metadata.get("kind").and_then(|v| v.as_str()) {
        Some("wplus") => {
            let w = WPlusCode::new(ar.get("w")?.clone())?;
            if let Some(g) = gen {
                if w.w.shape() != [g.num_style_blocks(), g.style_dim()] {
                    return Err(Error::Dimension {
                        block: "W+ code".into(),
                        expected: format!("[{}, {}]", g.num_style_blocks(), g.style_dim()),
                        got: format!("{:?}", w.w.shape()),
                    });
                }
            }
            LatentCode::WPlus(w)
        }
        Some("fs") => {
            let m = ar
                .metadata
                .get("m")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| corrupt("missing m"))? as usize;
            let code = FSCode {
                f: ar.get("F")?.clone(),
                s: ar.get("S")?.clone(),
                m,
                generator_fingerprint: fingerprint,
            };
            if let Some(g) = gen {
                code.validate(g)?;
            }
            LatentCode::FS(code)
        }
        _ => return Err(corrupt("unknown code kind")),
    };
    Ok(code)
}
