//! Composite code construction: structure tensors mixed by region masks,
//! appearance codes mixed by per-element convex weights found with
//! projected gradient descent on the masked perceptual loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backend::{row_vars, FeatureExtractor, Generator};
use crate::embed::Evaluation;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{extract_features, layer_masks, record_masked_lpips, FeatureValues};
use crate::masks::SoftRegionMask;
use crate::optim::{check_finite, Adam, BestIterate};
use crate::progress::{LossTrace, Progress};
use crate::tensor::Tensor;

pub use crate::losses::masked_lpips;

pub const STAGE_BLEND: &str = "blend_appearance";

/// Euclidean projection of `v` onto `{x ≥ 0, Σx = 1}` (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Per-element convex weights `u`, shape `(K, rows, style_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendWeights {
    pub u: Tensor,
}

impl BlendWeights {
    /// All weight on reference `k`.
    pub fn one_hot(num_refs: usize, rows: usize, dim: usize, k: usize) -> Self {
        let n = rows * dim;
        let mut data = vec![0.0; num_refs * n];
        data[k * n..(k + 1) * n].iter_mut().for_each(|v| *v = 1.0);
        Self {
            u: Tensor::from_parts(vec![num_refs, rows, dim], data),
        }
    }

    pub fn num_refs(&self) -> usize {
        self.u.shape()[0]
    }

    fn stride(&self) -> usize {
        self.u.len() / self.num_refs()
    }

    /// Projects every element position onto the simplex in place.
    pub fn project(&mut self) {
        let (k, n) = (self.num_refs(), self.stride());
        let data = self.u.data_mut();
        let mut v = vec![0.0; k];
        for p in 0..n {
            for (i, x) in v.iter_mut().enumerate() {
                *x = data[i * n + p];
            }
            for (i, x) in project_simplex(&v).into_iter().enumerate() {
                data[i * n + p] = x;
            }
        }
    }

    /// Largest violation of `Σ_k u_k = 1` and of `u ≥ 0`.
    pub fn feasibility_error(&self) -> (f64, f64) {
        let (k, n) = (self.num_refs(), self.stride());
        let d = self.u.data();
        let mut sum_err: f64 = 0.0;
        for p in 0..n {
            let s: f64 = (0..k).map(|i| d[i * n + p]).sum();
            sum_err = sum_err.max((s - 1.0).abs());
        }
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        (sum_err, (-min).max(0.0))
    }

    /// `Σ_k u_k ⊙ S_k`.
    pub fn combine(&self, s_refs: &[Tensor]) -> Result<Tensor> {
        let (k, n) = (self.num_refs(), self.stride());
        check_refs(s_refs, k, n)?;
        let mut out = vec![0.0; n];
        for (i, s) in s_refs.iter().enumerate() {
            let u = &self.u.data()[i * n..(i + 1) * n];
            for ((o, a), b) in out.iter_mut().zip(u).zip(s.data()) {
                *o += a * b;
            }
        }
        Tensor::new(s_refs[0].shape().to_vec(), out)
    }
}

fn check_refs(s_refs: &[Tensor], k: usize, n: usize) -> Result<()> {
    if s_refs.len() != k {
        return Err(Error::Shape(format!("{} appearance codes for {k} weights", s_refs.len())));
    }
    if let Some(s) = s_refs.iter().find(|s| s.len() != n || s.shape() != s_refs[0].shape()) {
        return Err(Error::Shape(format!(
            "appearance code {:?} does not match {:?}",
            s.shape(),
            s_refs[0].shape()
        )));
    }
    Ok(())
}

/// `Σ_k α_k ⊙ F_k` with each `α_k` broadcast over channels.
pub fn blend_structure(f_aligns: &[Tensor], alphas: &[SoftRegionMask]) -> Result<Tensor> {
    let first = f_aligns
        .first()
        .ok_or_else(|| Error::Request("blend needs at least one structure tensor".into()))?;
    if alphas.len() != f_aligns.len() {
        return Err(Error::Shape(format!(
            "{} structure tensors but {} masks",
            f_aligns.len(),
            alphas.len()
        )));
    }
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("structure tensor must be (C, H, W), got {shape:?}")));
    }
    let hw = shape[1] * shape[2];
    let mut out = vec![0.0; first.len()];
    for (f, a) in f_aligns.iter().zip(alphas) {
        if f.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("structure tensors {:?} and {shape:?} differ", f.shape())));
        }
        if (a.height(), a.width()) != (shape[1], shape[2]) {
            return Err(Error::Dimension {
                block: "structure blend mask".into(),
                expected: format!("{}x{}", shape[1], shape[2]),
                got: format!("{}x{}", a.height(), a.width()),
            });
        }
        for (i, (o, v)) in out.iter_mut().zip(f.data()).enumerate() {
            *o += a.values()[i % hw] * v;
        }
    }
    Tensor::new(shape, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendOptions {
    pub iters: usize,
    pub learning_rate: f64,
    /// Reference whose appearance the optimization starts from.
    pub init_reference: usize,
    /// Carried into cache keys; blending draws no random numbers.
    pub seed: u64,
}

impl Default for BlendOptions {
    fn default() -> Self {
        Self {
            iters: 600,
            learning_rate: 0.01,
            init_reference: 0,
            seed: 0,
        }
    }
}

/// Masked perceptual loss of `G(F_blend, Σ u_k ⊙ S_k)` as a function of `U`.
pub struct BlendObjective<'a> {
    gen: &'a dyn Generator,
    ex: &'a dyn FeatureExtractor,
    f_blend: Tensor,
    s_refs: Vec<Arc<Tensor>>,
    refs: Vec<FeatureValues>,
    masks: Vec<Vec<Arc<Tensor>>>,
}

impl<'a> BlendObjective<'a> {
    pub fn new(
        gen: &'a dyn Generator,
        ex: &'a dyn FeatureExtractor,
        f_blend: &Tensor,
        s_refs: &[Tensor],
        aligned: &[Image],
        alphas: &[SoftRegionMask],
    ) -> Result<Self> {
        let k = s_refs.len();
        if k == 0 || aligned.len() != k || alphas.len() != k {
            return Err(Error::Shape(format!(
                "blend needs matching counts, got {k} codes, {} images, {} masks",
                aligned.len(),
                alphas.len()
            )));
        }
        check_refs(s_refs, k, s_refs[0].len())?;
        let r = gen.resolution();
        let refs = aligned
            .iter()
            .map(|a| extract_features(ex, &a.resized(r, r)))
            .collect::<Result<Vec<_>>>()?;
        let masks = alphas.iter().zip(&refs).map(|(a, f)| layer_masks(a, f)).collect();
        Ok(Self {
            gen,
            ex,
            f_blend: f_blend.clone(),
            s_refs: s_refs.iter().map(|s| Arc::new(s.clone())).collect(),
            refs,
            masks,
        })
    }

    pub fn evaluate(&self, u: &BlendWeights) -> Result<Evaluation> {
        let k = self.s_refs.len();
        let s_shape = self.s_refs[0].shape().to_vec();
        let n = self.s_refs[0].len();
        let mut tape = Tape::new();
        let uv = tape.var(u.u.clone());
        let flat = tape.reshape(uv, &[k, n]);
        let mut s_blend = None;
        for (i, s) in self.s_refs.iter().enumerate() {
            let ui = tape.row(flat, i);
            let s_flat = Arc::new(s.as_ref().clone().reshape(&[n])?);
            let term = tape.mul_const(ui, s_flat);
            s_blend = Some(match s_blend {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        let s_blend = tape.reshape(s_blend.unwrap(), &s_shape);
        let rows = row_vars(&mut tape, s_blend, s_shape[0]);
        let f = tape.constant(self.f_blend.clone());
        let img = self.gen.record_suffix(&mut tape, f, &rows)?;
        let feats = self.ex.record_features(&mut tape, img)?;
        let refs: Vec<&FeatureValues> = self.refs.iter().collect();
        let loss = record_masked_lpips(&mut tape, self.ex, &feats.perceptual, &refs, Some(&self.masks))?;
        let grads = tape.backward(loss);
        let value = tape.value(loss).item();
        Ok(Evaluation {
            total: value,
            terms: vec![("masked_lpips", value)],
            grads: vec![grads.wrt(uv)],
        })
    }
}

#[derive(Clone, Debug)]
pub struct AppearanceBlend {
    pub s_blend: Tensor,
    pub weights: BlendWeights,
    pub trace: LossTrace,
}

/// Projected gradient descent on `U` from a one-hot start; an Adam step is
/// followed by per-element simplex projection. `observe` sees every
/// post-projection iterate. Returns the lowest-loss iterate.
#[allow(clippy::too_many_arguments)]
pub fn optimize_appearance_observed(
    gen: &dyn Generator,
    ex: &dyn FeatureExtractor,
    f_blend: &Tensor,
    s_refs: &[Tensor],
    aligned: &[Image],
    alphas: &[SoftRegionMask],
    opts: &BlendOptions,
    progress: &dyn Progress,
    observe: &mut dyn FnMut(usize, &BlendWeights),
) -> Result<AppearanceBlend> {
    let k = s_refs.len();
    if opts.iters == 0 {
        return Err(Error::Config("blend needs at least one iteration".into()));
    }
    if !(opts.learning_rate > 0.0 && opts.learning_rate.is_finite()) {
        return Err(Error::Config(format!("learning_rate must be > 0, got {}", opts.learning_rate)));
    }
    if opts.init_reference >= k {
        return Err(Error::Config(format!(
            "init_reference {} out of range for {k} references",
            opts.init_reference
        )));
    }
    let obj = BlendObjective::new(gen, ex, f_blend, s_refs, aligned, alphas)?;
    let s_shape = s_refs[0].shape();
    let mut u = BlendWeights::one_hot(k, s_shape[0], s_shape[1], opts.init_reference);
    let mut adam = Adam::new(opts.learning_rate, u.u.len());
    let mut trace = LossTrace::default();
    let mut best: Option<BestIterate<BlendWeights>> = None;
    for it in 0..=opts.iters {
        observe(it, &u);
        let ev = obj.evaluate(&u)?;
        check_finite(STAGE_BLEND, it, ev.total, &ev.grads[0])?;
        trace.push(ev.total, &ev.terms);
        match &mut best {
            None => best = Some(BestIterate::new(ev.total, u.clone())),
            Some(b) => b.offer(ev.total, it, || u.clone()),
        }
        progress.report(STAGE_BLEND, it, opts.iters);
        if it == opts.iters {
            break;
        }
        adam.step(u.u.data_mut(), ev.grads[0].data());
        u.project();
    }
    let best = best.expect("at least one iterate");
    trace.best_iteration = best.iteration;
    Ok(AppearanceBlend {
        s_blend: best.value.combine(s_refs)?,
        weights: best.value,
        trace,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn optimize_appearance(
    gen: &dyn Generator,
    ex: &dyn FeatureExtractor,
    f_blend: &Tensor,
    s_refs: &[Tensor],
    aligned: &[Image],
    alphas: &[SoftRegionMask],
    opts: &BlendOptions,
    progress: &dyn Progress,
) -> Result<AppearanceBlend> {
    optimize_appearance_observed(gen, ex, f_blend, s_refs, aligned, alphas, opts, progress, &mut |_, _| {})
}
