//! Perceptual, style and segmentation losses, each available as a plain
//! value function and as a tape recording for optimization.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::backend::{FeatureExtractor, Segmenter};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::masks::{resample_mask, resize_nearest, LabelGrid, SoftRegionMask, UNCOVERED};
use crate::tensor::Tensor;

/// Feature activations of a fixed image.
#[derive(Clone, Debug)]
pub struct FeatureValues {
    pub style: Vec<Tensor>,
    /// Channel-normalized.
    pub perceptual: Vec<Tensor>,
}

pub fn extract_features(ex: &dyn FeatureExtractor, img: &Image) -> Result<FeatureValues> {
    let mut tape = Tape::new();
    let x = tape.constant(img.tensor().clone());
    let f = ex.record_features(&mut tape, x)?;
    Ok(FeatureValues {
        style: f.style.iter().map(|&v| tape.value(v).clone()).collect(),
        perceptual: f.perceptual.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// `γᵀγ` for an `(H·W) × C` activation matrix `γ`.
pub fn gram_matrix(gamma: &Tensor) -> Result<Tensor> {
    let s = gamma.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("gram input must be (H*W, C), got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let g = gamma.data();
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let v: f64 = (0..n).map(|p| g[p * c + i] * g[p * c + j]).sum();
            out[i * c + j] = v;
            out[j * c + i] = v;
        }
    }
    Tensor::new(vec![c, c], out)
}

/// Gram matrix of a `(C, H, W)` activation divided by `C·H·W`; the form the
/// style loss compares.
pub fn style_gram(act: &Tensor) -> Tensor {
    let s = act.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let gamma = transpose_chw(act);
    let g = gram_matrix(&gamma).expect("rank-2 input");
    let k = 1.0 / (c * hw) as f64;
    g.map(|v| v * k)
}

fn transpose_chw(act: &Tensor) -> Tensor {
    let s = act.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let src = act.data();
    let mut out = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = src[ch * hw + p];
        }
    }
    Tensor::from_parts(vec![hw, c], out)
}

/// Soft mask resampled to each perceptual layer's grid.
pub fn layer_masks(alpha: &SoftRegionMask, targets: &FeatureValues) -> Vec<Arc<Tensor>> {
    targets
        .perceptual
        .iter()
        .map(|t| {
            let (h, w) = (t.shape()[1], t.shape()[2]);
            Arc::new(resample_mask(alpha, h, w).to_tensor())
        })
        .collect()
}

/// Records `Σ_ℓ 1/(H_ℓ W_ℓ) Σ_k Σ_ij α_{k,ℓ,ij} Σ_c w_{ℓ,c}² Δ_{c,ij}²`
/// between the generated features `perceptual` and each reference in
/// `refs`. With `masks = None` every α is one.
pub(crate) fn record_masked_lpips(
    tape: &mut Tape,
    ex: &dyn FeatureExtractor,
    perceptual: &[Var],
    refs: &[&FeatureValues],
    masks: Option<&[Vec<Arc<Tensor>>]>,
) -> Result<Var> {
    if let Some(m) = masks {
        if m.len() != refs.len() {
            return Err(Error::Request(format!(
                "{} reference images but {} masks",
                refs.len(),
                m.len()
            )));
        }
    }
    let mut total: Option<Var> = None;
    for (l, &phi) in perceptual.iter().enumerate() {
        let shape = tape.shape(phi).to_vec();
        let hw = (shape[1] * shape[2]) as f64;
        let w2: Vec<f64> = ex.perceptual_weights(l).iter().map(|w| w * w).collect();
        let w2 = tape.constant(Tensor::from_parts(vec![w2.len()], w2));
        for (k, r) in refs.iter().enumerate() {
            let target = tape.constant(r.perceptual[l].clone());
            let d = tape.sub(phi, target);
            let d2 = tape.square(d);
            let mut term = tape.scale_channels(d2, w2);
            if let Some(m) = masks {
                term = tape.mul_spatial(term, m[k][l].clone());
            }
            let s = tape.sum(term);
            let s = tape.scale(s, 1.0 / hw);
            total = Some(match total {
                Some(t) => tape.add(t, s),
                None => s,
            });
        }
    }
    total.ok_or_else(|| Error::Config("extractor has no perceptual layers".into()))
}

/// Learned perceptual distance between two images.
pub fn lpips(ex: &dyn FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    let fb = extract_features(ex, b)?;
    let mut tape = Tape::new();
    let x = tape.constant(a.tensor().clone());
    let fa = ex.record_features(&mut tape, x)?;
    let v = record_masked_lpips(&mut tape, ex, &fa.perceptual, &[&fb], None)?;
    Ok(tape.value(v).item())
}

/// Perceptual distance of `img` to each aligned reference, restricted to
/// that reference's region. Masks are at image resolution and are
/// bicubic-resampled to each layer.
pub fn masked_lpips(
    ex: &dyn FeatureExtractor,
    img: &Image,
    aligned: &[Image],
    alphas: &[SoftRegionMask],
) -> Result<f64> {
    if aligned.len() != alphas.len() {
        return Err(Error::Request(format!(
            "{} aligned images but {} masks",
            aligned.len(),
            alphas.len()
        )));
    }
    let refs = aligned
        .iter()
        .map(|a| extract_features(ex, a))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<_> = alphas.iter().zip(&refs).map(|(a, r)| layer_masks(a, r)).collect();
    let mut tape = Tape::new();
    let x = tape.constant(img.tensor().clone());
    let f = ex.record_features(&mut tape, x)?;
    let refs: Vec<&FeatureValues> = refs.iter().collect();
    let v = record_masked_lpips(&mut tape, ex, &f.perceptual, &refs, Some(&masks))?;
    Ok(tape.value(v).item())
}

/// Records `Σ_ℓ ‖K̂_ℓ(mask ⊙ img) − target_ℓ‖² / C_ℓ²` with `K̂` the
/// normalized gram, i.e. the mean squared gram difference per layer.
pub(crate) fn record_style_loss(
    tape: &mut Tape,
    ex: &dyn FeatureExtractor,
    img: Var,
    mask: Arc<Tensor>,
    target_grams: &[Tensor],
) -> Result<Var> {
    let masked = tape.mul_spatial(img, mask);
    let f = ex.record_features(tape, masked)?;
    let mut total: Option<Var> = None;
    for (&act, target) in f.style.iter().zip(target_grams) {
        let s = tape.shape(act).to_vec();
        let k = 1.0 / (s[0] * s[1] * s[2]) as f64;
        let g = tape.gram(act);
        let g = tape.scale(g, k);
        let t = tape.constant(target.clone());
        let d = tape.sub(g, t);
        let d2 = tape.square(d);
        let term = tape.sum(d2);
        let term = tape.scale(term, 1.0 / (s[0] * s[0]) as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("extractor has no style layers".into()))
}

/// Normalized grams of `mask ⊙ img` at every style layer.
pub fn masked_style_grams(ex: &dyn FeatureExtractor, img: &Image, mask: &SoftRegionMask) -> Result<Vec<Tensor>> {
    let masked = apply_mask(img, mask)?;
    Ok(extract_features(ex, &masked)?.style.iter().map(style_gram).collect())
}

fn apply_mask(img: &Image, mask: &SoftRegionMask) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let hw = h * w;
    let m = mask.values();
    let data = img
        .tensor()
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * m[i % hw])
        .collect();
    Image::from_tensor(Tensor::from_parts(vec![3, h, w], data))
}

/// Style loss between two images, each restricted to its own region by
/// zeroing the pixels outside it. Each layer contributes the mean squared
/// difference of its normalized grams.
pub fn masked_style_loss(
    ex: &dyn FeatureExtractor,
    img_a: &Image,
    img_b: &Image,
    mask_a: &SoftRegionMask,
    mask_b: &SoftRegionMask,
) -> Result<f64> {
    let ga = masked_style_grams(ex, img_a, mask_a)?;
    let gb = masked_style_grams(ex, img_b, mask_b)?;
    Ok(ga
        .iter()
        .zip(&gb)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
        .sum())
}

/// Target labels nearest-resampled to the segmenter's grid, as cross-entropy
/// class indices.
pub fn xent_targets(seg: &dyn Segmenter, target: &impl LabelGrid) -> Result<Arc<Vec<u16>>> {
    let r = seg.input_resolution();
    let labels = resize_nearest(target.labels(), target.height(), target.width(), r, r);
    if labels.contains(&UNCOVERED) {
        return Err(Error::InvalidLabels {
            labels: vec![UNCOVERED as u32],
            reason: "target mask still has uncovered pixels".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= seg.num_classes()) {
        return Err(Error::InvalidLabels {
            labels: vec![bad as u32],
            reason: format!("segmenter has {} classes", seg.num_classes()),
        });
    }
    Ok(Arc::new(labels.into_iter().map(u16::from).collect()))
}

/// Mean per-pixel cross-entropy of `seg(img)` against `target`.
pub fn xent(seg: &dyn Segmenter, img: &Image, target: &impl LabelGrid) -> Result<f64> {
    let labels = xent_targets(seg, target)?;
    let mut tape = Tape::new();
    let x = tape.constant(img.tensor().clone());
    let z = seg.record_logits(&mut tape, x)?;
    let v = tape.cross_entropy(z, labels);
    Ok(tape.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_of_zeros_and_single_site() {
        let z = gram_matrix(&Tensor::zeros(&[4, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let v = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = gram_matrix(&v).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.data()[i * 3 + j], v.data()[i] * v.data()[j]);
            }
        }
    }

    #[test]
    fn gram_matches_direct_product() {
        // γ is 3×2; γᵀγ entries written out by hand.
        let g = Tensor::new(vec![3, 2], vec![1.0, 2.0, -3.0, 0.5, 4.0, -1.0]).unwrap();
        let k = gram_matrix(&g).unwrap();
        let want = [
            1.0 + 9.0 + 16.0,
            2.0 - 1.5 - 4.0,
            2.0 - 1.5 - 4.0,
            4.0 + 0.25 + 1.0,
        ];
        assert_eq!(k.data(), &want);
    }

    #[test]
    fn style_gram_agrees_with_tape_gram() {
        let act = Tensor::new(vec![2, 2, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(act.clone());
        let g = tape.gram(x);
        let g = tape.scale(g, 1.0 / 12.0);
        let direct = style_gram(&act);
        for (a, b) in tape.value(g).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
