//! Aligned embedding: move the structure rows of a W+ code until the
//! generated image segments like the target mask, while a masked style loss
//! keeps the region's look close to the reference.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backend::{argmax_labels, row_vars, segment_labels, Backend, FeatureExtractor, Generator, Segmenter};
use crate::embed::Evaluation;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::WPlusCode;
use crate::losses::{masked_style_grams, record_style_loss, xent_targets};
use crate::masks::{region_indicator_set, LabelGrid, SoftRegionMask, TargetMask};
use crate::optim::{check_finite, Adam, BestIterate};
use crate::progress::{LossTrace, Progress};
use crate::tensor::Tensor;

pub const STAGE_ALIGN: &str = "align";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignOptions {
    pub iters: usize,
    /// Weight of the style term relative to the cross-entropy.
    pub lambda_s: f64,
    pub learning_rate: f64,
    /// Carried into cache keys; alignment draws no random numbers.
    pub seed: u64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            iters: 100,
            lambda_s: 5e4,
            learning_rate: 0.03,
            seed: 0,
        }
    }
}

impl AlignOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("alignment needs at least one iteration".into()));
        }
        if !(self.lambda_s >= 0.0) {
            return Err(Error::Config(format!("lambda_s must be >= 0, got {}", self.lambda_s)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Labels of `img` at image resolution.
pub fn segment_at_image_resolution(seg: &dyn Segmenter, img: &Image) -> Result<crate::masks::SemanticMask> {
    Ok(segment_labels(seg, img)?.resize_nearest(img.height(), img.width()))
}

/// `XEnt(M, Segment(G(w))) + λ_s Σ_ℓ ‖K̂_ℓ(ρ ⊙ G(w)) − K̂_ℓ(ρ_ref ⊙ I_ref)‖²`.
pub struct AlignObjective<'a> {
    gen: &'a dyn Generator,
    seg: &'a dyn Segmenter,
    ex: &'a dyn FeatureExtractor,
    labels: Arc<Vec<u16>>,
    classes: BTreeSet<u8>,
    ref_grams: Vec<Tensor>,
    lambda_s: f64,
}

impl<'a> AlignObjective<'a> {
    pub fn new(
        backend: &'a Backend,
        target: &TargetMask,
        ref_img: &Image,
        classes: &BTreeSet<u8>,
        lambda_s: f64,
    ) -> Result<Self> {
        let gen = backend.generator.as_ref();
        let seg = backend.segmenter.as_ref();
        let ex = backend.extractor.as_ref();
        let r = gen.resolution();
        let ref_img = ref_img.resized(r, r);
        let ref_mask = segment_at_image_resolution(seg, &ref_img)?;
        let rho_ref = region_indicator_set(&ref_mask, classes);
        Ok(Self {
            gen,
            seg,
            ex,
            labels: xent_targets(seg, target)?,
            classes: classes.clone(),
            ref_grams: masked_style_grams(ex, &ref_img, &rho_ref)?,
            lambda_s,
        })
    }

    /// Evaluates at `w`. The generated image's region mask is taken from
    /// its own hard segmentation unless `rho` is given; either way it is a
    /// constant of the step. Returns the mask used alongside.
    pub fn evaluate(&self, w: &Tensor, rho: Option<&SoftRegionMask>) -> Result<(Evaluation, SoftRegionMask)> {
        let mut tape = Tape::new();
        let wv = tape.var(w.clone());
        let rows = row_vars(&mut tape, wv, self.gen.num_style_blocks());
        let img = self.gen.record_full(&mut tape, &rows)?;
        let logits = self.seg.record_logits(&mut tape, img)?;
        let xent = tape.cross_entropy(logits, self.labels.clone());
        let rho = match rho {
            Some(r) => r.clone(),
            None => {
                let (h, w) = (tape.shape(img)[1], tape.shape(img)[2]);
                let labels = argmax_labels(tape.value(logits)).resize_nearest(h, w);
                region_indicator_set(&labels, &self.classes)
            }
        };
        let style = record_style_loss(
            &mut tape,
            self.ex,
            img,
            Arc::new(rho.to_tensor()),
            &self.ref_grams,
        )?;
        let weighted = tape.scale(style, self.lambda_s);
        let total = tape.add(xent, weighted);
        let grads = tape.backward(total);
        Ok((
            Evaluation {
                total: tape.value(total).item(),
                terms: vec![("xent", tape.value(xent).item()), ("style", tape.value(style).item())],
                grads: vec![grads.wrt(wv)],
            },
            rho,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub code: WPlusCode,
    pub trace: LossTrace,
    /// Cross-entropy of the returned code against the target.
    pub final_xent: f64,
}

/// Gradient descent from `w_rec` on rows `0..m` only; rows `m..` of the
/// result are bit-identical to `w_rec`. Returns the lowest-loss iterate
/// within `opts.iters` steps.
#[allow(clippy::too_many_arguments)]
pub fn align_code(
    backend: &Backend,
    w_rec: &WPlusCode,
    target: &TargetMask,
    ref_img: &Image,
    classes: &BTreeSet<u8>,
    m: usize,
    opts: &AlignOptions,
    progress: &dyn Progress,
) -> Result<Alignment> {
    opts.validate()?;
    let gen = backend.generator.as_ref();
    crate::backend::check_split(gen, m)?;
    if (target.height(), target.width()) == (0, 0) {
        return Err(Error::Shape("empty target mask".into()));
    }
    let obj = AlignObjective::new(backend, target, ref_img, classes, opts.lambda_s)?;
    let d = gen.style_dim();
    let limit = m * d;
    let mut w = w_rec.w.clone();
    let mut adam = Adam::new(opts.learning_rate, w.len());
    let mut trace = LossTrace::default();
    let mut best: Option<BestIterate<Tensor>> = None;
    for it in 0..=opts.iters {
        let (ev, _) = obj.evaluate(&w, None)?;
        check_finite(STAGE_ALIGN, it, ev.total, &ev.grads[0])?;
        trace.push(ev.total, &ev.terms);
        match &mut best {
            None => best = Some(BestIterate::new(ev.total, w.clone())),
            Some(b) => b.offer(ev.total, it, || w.clone()),
        }
        progress.report(STAGE_ALIGN, it, opts.iters);
        if it == opts.iters {
            break;
        }
        adam.step_masked(w.data_mut(), ev.grads[0].data(), |i| i < limit);
    }
    let best = best.expect("at least one iterate");
    trace.best_iteration = best.iteration;
    let final_xent = trace.term("xent")[best.iteration];
    Ok(Alignment {
        code: WPlusCode::new(best.value)?,
        trace,
        final_xent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_budget_and_weight() {
        let o = AlignOptions::default();
        assert_eq!(o.iters, 100);
        assert_eq!(o.lambda_s, 5e4);
        assert!(o.validate().is_ok());
        assert!(AlignOptions { lambda_s: -1.0, ..o }.validate().is_err());
    }
}
