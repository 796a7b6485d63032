//! Reconstruction embeddings: a W+ projection followed by joint refinement
//! of the structure tensor and appearance code.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backend::{row_vars, FeatureExtractor, Generator};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{fs_from_wplus, FSCode, WPlusCode};
use crate::losses::{extract_features, record_masked_lpips, FeatureValues};
use crate::optim::{check_finite, Adam, BestIterate};
use crate::progress::{LossTrace, Progress};
use crate::tensor::Tensor;

pub const STAGE_WPLUS: &str = "embed_wplus";
pub const STAGE_FS: &str = "embed_fs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedOptions {
    pub iters_wplus: usize,
    pub iters_fs: usize,
    pub learning_rate_w: f64,
    pub learning_rate_f: f64,
    pub learning_rate_s: f64,
    /// Weight of `‖w − w̄‖²` in the W+ objective.
    pub reg_weight: f64,
    /// Carried into cache keys. The optimizers themselves draw no random
    /// numbers, so runs are deterministic for any seed.
    pub seed: u64,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            iters_wplus: 1300,
            iters_fs: 400,
            learning_rate_w: 0.01,
            learning_rate_f: 0.1,
            learning_rate_s: 0.01,
            reg_weight: 1e-3,
            seed: 0,
        }
    }
}

impl EmbedOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iters_wplus == 0 || self.iters_fs == 0 {
            return Err(Error::Config("embedding iteration counts must be >= 1".into()));
        }
        for (name, lr) in [
            ("learning_rate_w", self.learning_rate_w),
            ("learning_rate_f", self.learning_rate_f),
            ("learning_rate_s", self.learning_rate_s),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::Config(format!("reg_weight must be >= 0, got {}", self.reg_weight)));
        }
        Ok(())
    }
}

/// One evaluation of an objective: total, named terms and gradients.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
    pub grads: Vec<Tensor>,
}

fn at_resolution(gen: &dyn Generator, img: &Image) -> Image {
    let r = gen.resolution();
    img.resized(r, r)
}

/// `LPIPS(G(w), I) + reg · ‖w − w̄‖²`.
pub struct WPlusObjective<'a> {
    gen: &'a dyn Generator,
    ex: &'a dyn FeatureExtractor,
    target: FeatureValues,
    mean: Tensor,
    reg_weight: f64,
}

impl<'a> WPlusObjective<'a> {
    pub fn new(gen: &'a dyn Generator, ex: &'a dyn FeatureExtractor, img: &Image, reg_weight: f64) -> Result<Self> {
        Ok(Self {
            gen,
            ex,
            target: extract_features(ex, &at_resolution(gen, img))?,
            mean: WPlusCode::mean(gen).w,
            reg_weight,
        })
    }

    pub fn evaluate(&self, w: &Tensor) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let wv = tape.var(w.clone());
        let rows = row_vars(&mut tape, wv, self.gen.num_style_blocks());
        let img = self.gen.record_full(&mut tape, &rows)?;
        let f = self.ex.record_features(&mut tape, img)?;
        let lp = record_masked_lpips(&mut tape, self.ex, &f.perceptual, &[&self.target], None)?;
        let mean = tape.constant(self.mean.clone());
        let d = tape.sub(wv, mean);
        let d2 = tape.square(d);
        let reg = tape.sum(d2);
        let reg = tape.scale(reg, self.reg_weight);
        let total = tape.add(lp, reg);
        let grads = tape.backward(total);
        Ok(Evaluation {
            total: tape.value(total).item(),
            terms: vec![("lpips", tape.value(lp).item()), ("reg", tape.value(reg).item())],
            grads: vec![grads.wrt(wv)],
        })
    }
}

/// `LPIPS(G(F, S), I) + ‖F − F_init‖²`.
pub struct FsObjective<'a> {
    gen: &'a dyn Generator,
    ex: &'a dyn FeatureExtractor,
    target: FeatureValues,
    f_init: Tensor,
}

impl<'a> FsObjective<'a> {
    pub fn new(gen: &'a dyn Generator, ex: &'a dyn FeatureExtractor, img: &Image, f_init: Tensor) -> Result<Self> {
        Ok(Self {
            gen,
            ex,
            target: extract_features(ex, &at_resolution(gen, img))?,
            f_init,
        })
    }

    pub fn evaluate(&self, f: &Tensor, s: &Tensor) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let fv = tape.var(f.clone());
        let sv = tape.var(s.clone());
        let rows = row_vars(&mut tape, sv, s.shape()[0]);
        let img = self.gen.record_suffix(&mut tape, fv, &rows)?;
        let feats = self.ex.record_features(&mut tape, img)?;
        let lp = record_masked_lpips(&mut tape, self.ex, &feats.perceptual, &[&self.target], None)?;
        let init = tape.constant(self.f_init.clone());
        let d = tape.sub(fv, init);
        let d2 = tape.square(d);
        let lf = tape.sum(d2);
        let total = tape.add(lp, lf);
        let grads = tape.backward(total);
        Ok(Evaluation {
            total: tape.value(total).item(),
            terms: vec![("lpips", tape.value(lp).item()), ("l_f", tape.value(lf).item())],
            grads: vec![grads.wrt(fv), grads.wrt(sv)],
        })
    }
}

#[derive(Clone, Debug)]
pub struct WPlusEmbedding {
    pub code: WPlusCode,
    pub trace: LossTrace,
}

#[derive(Clone, Debug)]
pub struct FsEmbedding {
    pub code: FSCode,
    pub trace: LossTrace,
}

/// Gradient descent on the W+ objective from the mean latent; returns the
/// lowest-loss iterate.
pub fn embed_wplus(
    gen: &dyn Generator,
    ex: &dyn FeatureExtractor,
    img: &Image,
    opts: &EmbedOptions,
    progress: &dyn Progress,
) -> Result<WPlusEmbedding> {
    opts.validate()?;
    let obj = WPlusObjective::new(gen, ex, img, opts.reg_weight)?;
    let mut w = WPlusCode::mean(gen).w;
    let mut adam = Adam::new(opts.learning_rate_w, w.len());
    let mut trace = LossTrace::default();
    let mut best: Option<BestIterate<Tensor>> = None;
    for it in 0..=opts.iters_wplus {
        let ev = obj.evaluate(&w)?;
        check_finite(STAGE_WPLUS, it, ev.total, &ev.grads[0])?;
        trace.push(ev.total, &ev.terms);
        match &mut best {
            None => best = Some(BestIterate::new(ev.total, w.clone())),
            Some(b) => b.offer(ev.total, it, || w.clone()),
        }
        progress.report(STAGE_WPLUS, it, opts.iters_wplus);
        if it == opts.iters_wplus {
            break;
        }
        adam.step(w.data_mut(), ev.grads[0].data());
    }
    let best = best.expect("at least one iterate");
    trace.best_iteration = best.iteration;
    Ok(WPlusEmbedding {
        code: WPlusCode::new(best.value)?,
        trace,
    })
}

/// Joint refinement of `(F, S)` starting from the split of `w_rec` at
/// block `m`; returns the lowest-loss iterate.
pub fn refine_fs(
    gen: &dyn Generator,
    ex: &dyn FeatureExtractor,
    img: &Image,
    w_rec: &WPlusCode,
    m: usize,
    opts: &EmbedOptions,
    progress: &dyn Progress,
) -> Result<FsEmbedding> {
    opts.validate()?;
    let init = fs_from_wplus(gen, w_rec, m)?;
    let obj = FsObjective::new(gen, ex, img, init.f.clone())?;
    let (mut f, mut s) = (init.f.clone(), init.s.clone());
    let mut adam_f = Adam::new(opts.learning_rate_f, f.len());
    let mut adam_s = Adam::new(opts.learning_rate_s, s.len());
    let mut trace = LossTrace::default();
    let mut best: Option<BestIterate<(Tensor, Tensor)>> = None;
    for it in 0..=opts.iters_fs {
        let ev = obj.evaluate(&f, &s)?;
        check_finite(STAGE_FS, it, ev.total, &ev.grads[0])?;
        check_finite(STAGE_FS, it, ev.total, &ev.grads[1])?;
        trace.push(ev.total, &ev.terms);
        match &mut best {
            None => best = Some(BestIterate::new(ev.total, (f.clone(), s.clone()))),
            Some(b) => b.offer(ev.total, it, || (f.clone(), s.clone())),
        }
        progress.report(STAGE_FS, it, opts.iters_fs);
        if it == opts.iters_fs {
            break;
        }
        adam_f.step(f.data_mut(), ev.grads[0].data());
        adam_s.step(s.data_mut(), ev.grads[1].data());
    }
    let best = best.expect("at least one iterate");
    trace.best_iteration = best.iteration;
    let (f, s) = best.value;
    Ok(FsEmbedding {
        code: FSCode { f, s, ..init },
        trace,
    })
}
