//! Differentiable interfaces to the image generator, the semantic segmenter
//! and the perceptual feature extractor.
//!
//! Each network is a trait object recording its forward pass on a [`Tape`],
//! so every loss in the crate can be differentiated with respect to latent
//! codes or images. Concrete implementations load from named-array weight
//! archives; [`toy::make_toy_world`] builds small seeded instances of all
//! three for desk-scale work.

mod config;
mod extractor;
mod generator;
mod segmenter;
pub mod toy;

use std::sync::Arc;

use sha2::{Digest, Sha256};

pub use config::BackendConfig;
pub use extractor::{ConvFeatureExtractor, ExtractorArch, StageSpec};
pub use generator::{BlockSpec, GeneratorArch, StyleGenerator};
pub use segmenter::{ConvSegmenter, SegmenterArch};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::masks::SemanticMask;
use crate::tensor::{GridShape, Tensor};

/// Style-based synthesis network split at an arbitrary style block.
pub trait Generator: Send + Sync {
    fn num_style_blocks(&self) -> usize;

    fn style_dim(&self) -> usize;

    /// Output images are `resolution × resolution`.
    fn resolution(&self) -> usize;

    /// `block_shapes()[i]` is the activation shape after the first `i` style
    /// blocks; index 0 is the learned constant input.
    fn block_shapes(&self) -> &[GridShape];

    /// Content hash of all weights and fixed noise.
    fn fingerprint(&self) -> &str;

    /// Mean of the mapped latent distribution, one `style_dim` vector.
    fn mean_latent(&self) -> &Tensor;

    /// Runs the first `rows.len()` style blocks.
    fn record_prefix(&self, tape: &mut Tape, rows: &[Var]) -> Result<Var>;

    /// Runs the remaining blocks from a structure tensor; the split point is
    /// `num_style_blocks - rows.len()`.
    fn record_suffix(&self, tape: &mut Tape, structure: Var, rows: &[Var]) -> Result<Var>;

    fn record_full(&self, tape: &mut Tape, rows: &[Var]) -> Result<Var> {
        let f = self.record_prefix(tape, &rows[..1])?;
        self.record_suffix(tape, f, &rows[1..])
    }
}

/// Per-pixel class logits from an image.
pub trait Segmenter: Send + Sync {
    fn num_classes(&self) -> usize;

    fn input_resolution(&self) -> usize;

    fn fingerprint(&self) -> &str;

    /// `(num_classes, R, R)` logits for a `(3, H, W)` image; images of
    /// another size are bicubic-resampled on the tape first.
    fn record_logits(&self, tape: &mut Tape, image: Var) -> Result<Var>;
}

/// Activations of a feature extractor for one image.
pub struct Features {
    /// Raw activations of the style (gram) layers.
    pub style: Vec<Var>,
    /// Channel-normalized activations of the perceptual layers.
    pub perceptual: Vec<Var>,
}

pub trait FeatureExtractor: Send + Sync {
    fn style_layer_names(&self) -> &[String];

    fn perceptual_layer_names(&self) -> &[String];

    /// Learned per-channel weights of perceptual layer `layer`.
    fn perceptual_weights(&self, layer: usize) -> &[f64];

    fn fingerprint(&self) -> &str;

    fn record_features(&self, tape: &mut Tape, image: Var) -> Result<Features>;
}

pub type GeneratorHandle = Arc<dyn Generator>;
pub type SegmenterHandle = Arc<dyn Segmenter>;
pub type ExtractorHandle = Arc<dyn FeatureExtractor>;

/// The three networks a compositing run needs.
#[derive(Clone)]
pub struct Backend {
    pub generator: GeneratorHandle,
    pub segmenter: SegmenterHandle,
    pub extractor: ExtractorHandle,
}

fn check_rows(gen: &dyn Generator, rows: &Tensor, expected_rows: usize, what: &str) -> Result<()> {
    let want = [expected_rows, gen.style_dim()];
    if rows.shape() != want {
        return Err(Error::Dimension {
            block: what.to_string(),
            expected: format!("{:?}", want),
            got: format!("{:?}", rows.shape()),
        });
    }
    Ok(())
}

pub(crate) fn check_split(gen: &dyn Generator, m: usize) -> Result<()> {
    let n = gen.num_style_blocks();
    if m == 0 || m >= n {
        return Err(Error::BlockOutOfRange { m, num_blocks: n });
    }
    Ok(())
}

pub(crate) fn row_vars(tape: &mut Tape, code: Var, rows: usize) -> Vec<Var> {
    (0..rows).map(|i| tape.row(code, i)).collect()
}

/// Renders a full W+ code (`num_style_blocks × style_dim`).
pub fn synth_full(gen: &dyn Generator, w: &Tensor) -> Result<Image> {
    check_rows(gen, w, gen.num_style_blocks(), "W+ code")?;
    let mut tape = Tape::new();
    let code = tape.constant(w.clone());
    let rows = row_vars(&mut tape, code, gen.num_style_blocks());
    let img = gen.record_full(&mut tape, &rows)?;
    Image::from_tensor(tape.value(img).clone())
}

/// Activations after the first `m` style blocks, driven by rows `0..m` of `w`.
pub fn synth_prefix(gen: &dyn Generator, w: &Tensor, m: usize) -> Result<Tensor> {
    check_split(gen, m)?;
    check_rows(gen, w, gen.num_style_blocks(), "W+ code")?;
    let mut tape = Tape::new();
    let code = tape.constant(w.clone());
    let rows = row_vars(&mut tape, code, m);
    let f = gen.record_prefix(&mut tape, &rows)?;
    Ok(tape.value(f).clone())
}

/// Renders from a structure tensor at block `m` and an appearance code of
/// `num_style_blocks - m` rows.
pub fn synth_suffix(gen: &dyn Generator, structure: &Tensor, appearance: &Tensor) -> Result<Image> {
    let n = gen.num_style_blocks();
    let s_rows = appearance.shape().first().copied().unwrap_or(0);
    if s_rows == 0 || s_rows >= n {
        return Err(Error::Dimension {
            block: "appearance code".into(),
            expected: format!("1..{} rows of {}", n, gen.style_dim()),
            got: format!("{:?}", appearance.shape()),
        });
    }
    let m = n - s_rows;
    check_rows(gen, appearance, s_rows, "appearance code")?;
    let want = gen.block_shapes()[m];
    if structure.shape() != want.dims() {
        return Err(Error::Dimension {
            block: format!("structure tensor at block {m}"),
            expected: want.to_string(),
            got: format!("{:?}", structure.shape()),
        });
    }
    let mut tape = Tape::new();
    let f = tape.constant(structure.clone());
    let s = tape.constant(appearance.clone());
    let rows = row_vars(&mut tape, s, s_rows);
    let img = gen.record_suffix(&mut tape, f, &rows)?;
    Image::from_tensor(tape.value(img).clone())
}

pub fn segment_logits(seg: &dyn Segmenter, img: &Image) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(img.tensor().clone());
    let z = seg.record_logits(&mut tape, x)?;
    Ok(tape.value(z).clone())
}

/// Argmax over classes with ties broken toward the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> SemanticMask {
    let s = logits.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let z = logits.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if z[k * hw + p] > z[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    SemanticMask::new(h, w, labels, c).expect("argmax labels are in range")
}

pub fn segment_labels(seg: &dyn Segmenter, img: &Image) -> Result<SemanticMask> {
    Ok(argmax_labels(&segment_logits(seg, img)?))
}

/// SHA-256 over entry names, shapes and f32 bit patterns, in name order.
pub(crate) fn fingerprint_entries<'a>(entries: impl Iterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut sorted: Vec<_> = entries.collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update((*v as f32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
