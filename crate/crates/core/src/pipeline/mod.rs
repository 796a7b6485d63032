//! End-to-end compositing: segmentation, target mask, embedding, alignment,
//! structure transfer and blending, with an embedding cache and an optional
//! per-job workspace for intermediate artifacts.

mod cache;
mod request;
mod workspace;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use cache::{CachedEmbedding, EmbeddingCache};
pub use request::{HairRequest, JobRequest, RegionRef, TransferRequest};
pub use workspace::Workspace;

use crate::align::{align_code, segment_at_image_resolution, AlignOptions};
use crate::backend::{check_split, Backend, Generator};
use crate::blend::{blend_structure, optimize_appearance, BlendOptions, BlendWeights};
use crate::embed::EmbedOptions;
use crate::error::{Error, Result, StageExt};
use crate::image::Image;
use crate::latent::{transfer_structure, FSCode, LatentCode, WPlusCode};
use crate::masks::{
    build_target_mask, celebamask_to_hair_task, fill_uncovered_nearest, inpaint_target_mask,
    region_indicator_set, relabel, resample_mask, task, LabelGrid, LabelMapping, RegionSpec, SemanticMask,
    TargetMask, UNCOVERED,
};
use crate::progress::{LossTrace, Progress};

pub const STAGE_VALIDATE: &str = "validate";
pub const STAGE_SEGMENT: &str = "segment";
pub const STAGE_TARGET: &str = "target_mask";
pub const STAGE_EMBED: &str = "embed";
pub const STAGE_ALIGN: &str = "align";
pub const STAGE_TRANSFER: &str = "transfer_structure";
pub const STAGE_BLEND_STRUCTURE: &str = "blend_structure";
pub const STAGE_BLEND: &str = "blend_appearance";
pub const STAGE_SYNTH: &str = "synthesize";

/// Split block used when none is configured: 7 of 18 blocks, scaled to the
/// generator's depth.
pub fn default_split(gen: &dyn Generator) -> usize {
    let n = gen.num_style_blocks();
    ((n as f64 * 7.0 / 18.0).round() as usize).clamp(1, n - 1)
}

/// How segmenter classes map onto the {background, other, hair} labels used
/// to inpaint hair masks, and which segmenter class stands for each of the
/// three when inpainted pixels are written back.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub to_task: LabelMapping,
    pub representatives: [u8; 3],
}

impl Default for LabelScheme {
    fn default() -> Self {
        Self {
            to_task: LabelMapping::identity(task::NUM_CLASSES),
            representatives: [task::BACKGROUND, task::OTHER, task::HAIR],
        }
    }
}

impl LabelScheme {
    /// 19-class face parsing; inpainted "other" pixels become skin.
    pub fn celebamask() -> Self {
        Self {
            to_task: celebamask_to_hair_task(),
            representatives: [0, 1, 13],
        }
    }

    pub fn hair_classes(&self) -> BTreeSet<u8> {
        self.to_task
            .map
            .iter()
            .filter(|(_, &t)| t == task::HAIR)
            .map(|(&c, _)| c)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct PipelineOptions {
    /// Structure block; `None` picks [`default_split`].
    pub m: Option<usize>,
    pub embed: EmbedOptions,
    pub align: AlignOptions,
    pub blend: BlendOptions,
    pub labels: LabelScheme,
}


impl PipelineOptions {
    pub fn split(&self, gen: &dyn Generator) -> Result<usize> {
        let m = self.m.unwrap_or_else(|| default_split(gen));
        check_split(gen, m)?;
        Ok(m)
    }
}

/// One region of a composite: the reference supplying its structure, the
/// classes it owns, and optional separate shape and appearance sources.
#[derive(Clone, Debug)]
pub struct RegionSource {
    pub image: Image,
    pub classes: BTreeSet<u8>,
    /// Image whose segmentation defines the region's shape in the target
    /// mask; defaults to `image`.
    pub shape: Option<Image>,
    /// Image whose W+ reconstruction supplies the appearance code. Ignored
    /// when it is the structure image itself.
    pub appearance: Option<Image>,
}

impl RegionSource {
    pub fn new(image: Image, classes: impl IntoIterator<Item = u8>) -> Self {
        Self {
            image,
            classes: classes.into_iter().collect(),
            shape: None,
            appearance: None,
        }
    }
}

/// Regions in priority order: index 0 (the identity image) lowest.
#[derive(Clone, Debug)]
pub struct CompositeRequest {
    pub regions: Vec<RegionSource>,
    pub target_mask: Option<TargetMask>,
    pub options: PipelineOptions,
}

#[derive(Clone, Debug)]
pub struct CompositeResult {
    pub image: Image,
    pub target: TargetMask,
    pub code: FSCode,
    pub weights: BlendWeights,
    pub aligned_codes: Vec<WPlusCode>,
    pub traces: Vec<(String, LossTrace)>,
}

fn validate(req: &CompositeRequest, num_classes: usize) -> Result<()> {
    if req.regions.is_empty() {
        return Err(Error::Request("at least one region is required".into()));
    }
    let mut seen = BTreeSet::new();
    for (k, r) in req.regions.iter().enumerate() {
        if r.classes.is_empty() {
            return Err(Error::Request(format!("region {k} claims no classes")));
        }
        for &c in &r.classes {
            if c as usize >= num_classes {
                return Err(Error::InvalidLabels {
                    labels: vec![c as u32],
                    reason: format!("segmenter has {num_classes} classes"),
                });
            }
            if !seen.insert(c) {
                return Err(Error::InvalidLabels {
                    labels: vec![c as u32],
                    reason: "class claimed by more than one region".into(),
                });
            }
        }
    }
    if req.options.blend.init_reference >= req.regions.len() {
        return Err(Error::Config(format!(
            "init_reference {} out of range for {} regions",
            req.options.blend.init_reference,
            req.regions.len()
        )));
    }
    Ok(())
}

/// Fills uncovered pixels of `target`. With exactly two regions, one of
/// which owns every hair class, the hair-mask heuristic is used with
/// `masks` (indexed like `classes`); otherwise each pixel takes the nearest
/// claimed label.
pub fn complete_target_mask(
    target: TargetMask,
    masks: &[SemanticMask],
    classes: &[BTreeSet<u8>],
    scheme: &LabelScheme,
) -> Result<TargetMask> {
    if target.is_complete() {
        return Ok(target);
    }
    let hair = scheme.hair_classes();
    let hair_idx = (classes.len() == 2 && !hair.is_empty())
        .then(|| classes.iter().position(|c| c.is_superset(&hair)))
        .flatten();
    let Some(hair_idx) = hair_idx else {
        return fill_uncovered_nearest(&target);
    };
    let to_task = |l: u8| -> Result<u8> {
        scheme.to_task.map.get(&l).copied().ok_or_else(|| Error::InvalidLabels {
            labels: vec![l as u32],
            reason: "label scheme has no task label for this class".into(),
        })
    };
    let task_labels = target
        .labels()
        .iter()
        .map(|&l| if l == UNCOVERED { Ok(UNCOVERED) } else { to_task(l) })
        .collect::<Result<Vec<_>>>()?;
    let task_target = TargetMask::new(
        target.height(),
        target.width(),
        task_labels,
        target.provenance().to_vec(),
        task::NUM_CLASSES,
    )?;
    let filled = inpaint_target_mask(
        &task_target,
        &relabel(&masks[hair_idx], &scheme.to_task)?,
        &relabel(&masks[1 - hair_idx], &scheme.to_task)?,
    )?;
    let labels = target
        .labels()
        .iter()
        .zip(filled.labels())
        .map(|(&orig, &t)| if orig == UNCOVERED { scheme.representatives[t as usize] } else { orig })
        .collect();
    TargetMask::new(
        target.height(),
        target.width(),
        labels,
        target.provenance().to_vec(),
        target.num_classes(),
    )
}

/// Segments the references and composes the completed target mask.
pub fn compose_target_mask(backend: &Backend, req: &CompositeRequest) -> Result<(TargetMask, Vec<SemanticMask>)> {
    let gen = backend.generator.as_ref();
    let seg = backend.segmenter.as_ref();
    let r = gen.resolution();
    let own: Vec<SemanticMask> = req
        .regions
        .iter()
        .map(|reg| segment_at_image_resolution(seg, &reg.image.resized(r, r)))
        .collect::<Result<_>>()
        .stage(STAGE_SEGMENT)?;
    let classes: Vec<BTreeSet<u8>> = req.regions.iter().map(|reg| reg.classes.clone()).collect();
    let target = match &req.target_mask {
        Some(t) => {
            let t = if (t.height(), t.width()) != (r, r) { t.resize_nearest(r, r) } else { t.clone() };
            complete_target_mask(t, &own, &classes, &req.options.labels).stage(STAGE_TARGET)?
        }
        None => {
            let shapes: Vec<SemanticMask> = req
                .regions
                .iter()
                .zip(&own)
                .map(|(reg, m)| match &reg.shape {
                    Some(img) => segment_at_image_resolution(seg, &img.resized(r, r)),
                    None => Ok(m.clone()),
                })
                .collect::<Result<_>>()
                .stage(STAGE_SEGMENT)?;
            let specs: Vec<RegionSpec> = req
                .regions
                .iter()
                .enumerate()
                .map(|(k, reg)| RegionSpec::new(k, reg.classes.iter().copied()))
                .collect();
            let built = build_target_mask(&shapes, &specs).stage(STAGE_TARGET)?;
            complete_target_mask(built, &shapes, &classes, &req.options.labels).stage(STAGE_TARGET)?
        }
    };
    Ok((target, own))
}

/// Runs the whole compositing pipeline.
pub fn compose(
    backend: &Backend,
    req: &CompositeRequest,
    cache: &EmbeddingCache,
    workspace: Option<&Workspace>,
    progress: &dyn Progress,
) -> Result<CompositeResult> {
    let gen = backend.generator.as_ref();
    let ex = backend.extractor.as_ref();
    validate(req, backend.segmenter.num_classes()).stage(STAGE_VALIDATE)?;
    let opts = &req.options;
    let m = opts.split(gen).stage(STAGE_VALIDATE)?;
    let r = gen.resolution();
    let images: Vec<Image> = req.regions.iter().map(|reg| reg.image.resized(r, r)).collect();

    let (target, own_masks) = compose_target_mask(backend, req)?;
    if let Some(ws) = workspace {
        ws.write_target(&target)?;
    }
    let mut traces = Vec::new();

    let mut recs = Vec::new();
    for (k, img) in images.iter().enumerate() {
        let (e, _) = cache
            .get_or_embed(gen, ex, img, m, &opts.embed, progress)
            .stage(STAGE_EMBED)?;
        traces.push((format!("embed_wplus_{k}"), e.wplus_trace.clone()));
        traces.push((format!("embed_fs_{k}"), e.fs_trace.clone()));
        recs.push(e);
    }

    let mut s_refs = Vec::new();
    for (k, reg) in req.regions.iter().enumerate() {
        // An appearance image identical to the structure image adds nothing,
        // so the region keeps its FS appearance code.
        let s = match reg.appearance.as_ref().filter(|app| app.content_hash() != reg.image.content_hash()) {
            Some(app) => {
                let (e, _) = cache
                    .get_or_embed(gen, ex, &app.resized(r, r), m, &opts.embed, progress)
                    .stage(STAGE_EMBED)?;
                e.wplus.w.rows(m..gen.num_style_blocks())?
            }
            None => recs[k].fs.s.clone(),
        };
        s_refs.push(s);
    }

    let mut aligned_codes = Vec::new();
    for (k, reg) in req.regions.iter().enumerate() {
        let a = align_code(
            backend,
            &recs[k].wplus,
            &target,
            &images[k],
            &reg.classes,
            m,
            &opts.align,
            progress,
        )
        .stage(STAGE_ALIGN)?;
        traces.push((format!("align_{k}"), a.trace));
        aligned_codes.push(a.code);
    }

    let mut f_aligns = Vec::new();
    for (k, reg) in req.regions.iter().enumerate() {
        let f = transfer_structure(
            gen,
            &recs[k].fs.f,
            &aligned_codes[k],
            &target,
            &own_masks[k],
            &reg.classes,
            m,
        )
        .stage(STAGE_TRANSFER)?;
        f_aligns.push(f);
    }

    let block = gen.block_shapes()[m];
    let alphas_img: Vec<_> = req
        .regions
        .iter()
        .map(|reg| region_indicator_set(&target, &reg.classes))
        .collect();
    let alphas_m: Vec<_> = alphas_img
        .iter()
        .map(|a| resample_mask(a, block.height, block.width))
        .collect();
    let f_blend = blend_structure(&f_aligns, &alphas_m).stage(STAGE_BLEND_STRUCTURE)?;

    let aligned_imgs = f_aligns
        .iter()
        .zip(&s_refs)
        .map(|(f, s)| crate::backend::synth_suffix(gen, f, s))
        .collect::<Result<Vec<_>>>()
        .stage(STAGE_BLEND)?;
    let blend = optimize_appearance(gen, ex, &f_blend, &s_refs, &aligned_imgs, &alphas_img, &opts.blend, progress)
        .stage(STAGE_BLEND)?;
    traces.push(("blend".into(), blend.trace.clone()));

    let code = FSCode {
        f: f_blend,
        s: blend.s_blend,
        m,
        generator_fingerprint: gen.fingerprint().to_string(),
    };
    let image = code.synth(gen).stage(STAGE_SYNTH)?;
    if let Some(ws) = workspace {
        for (k, img) in aligned_imgs.iter().enumerate() {
            ws.write_image(&format!("aligned_{k}.png"), img)?;
        }
        for (k, c) in aligned_codes.iter().enumerate() {
            ws.write_code(&format!("align_{k}.code"), &LatentCode::WPlus(c.clone()), gen.fingerprint())?;
        }
        ws.write_code("blend.code", &LatentCode::FS(code.clone()), gen.fingerprint())?;
        ws.write_weights(&blend.weights)?;
        ws.write_json("traces.json", &traces)?;
        ws.write_image("result.png", &image)?;
    }
    Ok(CompositeResult {
        image,
        target,
        code,
        weights: blend.weights,
        aligned_codes,
        traces,
    })
}

/// Copies the hair of `hair` onto `identity`.
#[allow(clippy::too_many_arguments)]
pub fn hair_transfer(
    backend: &Backend,
    identity: Image,
    hair: Option<Image>,
    target_mask: Option<TargetMask>,
    options: PipelineOptions,
    cache: &EmbeddingCache,
    workspace: Option<&Workspace>,
    progress: &dyn Progress,
) -> Result<CompositeResult> {
    let hair = hair
        .ok_or_else(|| Error::Request("hair transfer needs a hair reference image".into()).in_stage(STAGE_VALIDATE))?;
    let req = hair_request(backend.segmenter.num_classes(), identity, hair, target_mask, options)?;
    compose(backend, &req, cache, workspace, progress)
}

/// Two regions: the identity owns every class except the hair classes,
/// which go to `hair`.
pub fn hair_request(
    num_classes: usize,
    identity: Image,
    hair: Image,
    target_mask: Option<TargetMask>,
    options: PipelineOptions,
) -> Result<CompositeRequest> {
    let hair_classes = options.labels.hair_classes();
    if hair_classes.is_empty() {
        return Err(Error::Config("label scheme has no hair class".into()).in_stage(STAGE_VALIDATE));
    }
    let others = (0..num_classes as u8).filter(|c| !hair_classes.contains(c));
    Ok(CompositeRequest {
        regions: vec![RegionSource::new(identity, others), RegionSource::new(hair, hair_classes)],
        target_mask,
        options,
    })
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: Image,
    pub code: FSCode,
    pub wplus: WPlusCode,
    pub wplus_image: Image,
}

/// Embeds `img` (W+ then FS) and renders both reconstructions.
pub fn reconstruct(
    backend: &Backend,
    img: &Image,
    options: &PipelineOptions,
    cache: &EmbeddingCache,
    progress: &dyn Progress,
) -> Result<Reconstruction> {
    let gen = backend.generator.as_ref();
    let m = options.split(gen).stage(STAGE_VALIDATE)?;
    let r = gen.resolution();
    let (e, _) = cache
        .get_or_embed(gen, backend.extractor.as_ref(), &img.resized(r, r), m, &options.embed, progress)
        .stage(STAGE_EMBED)?;
    Ok(Reconstruction {
        image: e.fs.synth(gen).stage(STAGE_SYNTH)?,
        wplus_image: e.wplus.synth(gen).stage(STAGE_SYNTH)?,
        code: e.fs.clone(),
        wplus: e.wplus.clone(),
    })
}
