//! Label maps: per-image segmentations, composed target masks with
//! per-pixel provenance, region indicators and their soft resampled forms.

mod inpaint;
pub mod io;
mod tables;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use inpaint::{fast_marching_fill, fill_uncovered_nearest, inpaint_target_mask};
pub use io::{load_label_png, save_label_png, sidecar_path, LabelTable};
pub use tables::{celebamask_to_hair_task, task, CELEBAMASK_CLASSES};

use crate::error::{Error, Result};
use crate::resample::resample_chw;
use crate::tensor::Tensor;

/// Label value marking a target-mask pixel that no reference claimed.
pub const UNCOVERED: u8 = 255;

/// Anything that is an `H × W` grid of `u8` labels.
pub trait LabelGrid {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn labels(&self) -> &[u8];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    num_classes: usize,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label grid {height}x{width} needs {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > UNCOVERED as usize {
            return Err(Error::Config(format!(
                "num_classes must be in 1..=255, got {num_classes}"
            )));
        }
        let bad: BTreeSet<u32> = labels
            .iter()
            .filter(|&&l| l as usize >= num_classes)
            .map(|&l| l as u32)
            .collect();
        if !bad.is_empty() {
            return Err(Error::InvalidLabels {
                labels: bad.into_iter().collect(),
                reason: format!("labels must be < {num_classes}"),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
            num_classes,
        })
    }

    pub fn constant(height: usize, width: usize, label: u8, num_classes: usize) -> Result<Self> {
        Self::new(height, width, vec![label; height * width], num_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Nearest-neighbour resize with half-pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> SemanticMask {
        Self {
            height,
            width,
            labels: resize_nearest(&self.labels, self.height, self.width, height, width),
            num_classes: self.num_classes,
        }
    }
}

impl LabelGrid for SemanticMask {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn labels(&self) -> &[u8] {
        &self.labels
    }
}

pub(crate) fn resize_nearest(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let map = |i: usize, out: usize, inp: usize| (((i as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = map(y, oh, h);
        for x in 0..ow {
            out.push(src[sy * w + map(x, ow, w)]);
        }
    }
    out
}

/// Where a target-mask pixel got its label from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Reference(usize),
    /// Filled by inpainting, or still pending when the label is [`UNCOVERED`].
    Inpainted,
}

impl Provenance {
    /// Single-byte encoding used by the provenance PNG: the reference index,
    /// or 255 for inpainted pixels.
    pub fn to_byte(self) -> u8 {
        match self {
            Provenance::Reference(k) => k.min(254) as u8,
            Provenance::Inpainted => UNCOVERED,
        }
    }

    pub fn from_byte(b: u8) -> Self {
        if b == UNCOVERED {
            Provenance::Inpainted
        } else {
            Provenance::Reference(b as usize)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    provenance: Vec<Provenance>,
    num_classes: usize,
}

impl TargetMask {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        provenance: Vec<Provenance>,
        num_classes: usize,
    ) -> Result<Self> {
        if provenance.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} provenance entries",
                labels.len(),
                provenance.len()
            )));
        }
        // Validate everything except the sentinel.
        let covered: Vec<u8> = labels.iter().map(|&l| if l == UNCOVERED { 0 } else { l }).collect();
        SemanticMask::new(height, width, covered, num_classes)?;
        if let Some(i) = labels
            .iter()
            .zip(&provenance)
            .position(|(&l, p)| l == UNCOVERED && *p != Provenance::Inpainted)
        {
            return Err(Error::InvalidLabels {
                labels: vec![UNCOVERED as u32],
                reason: format!("pixel {i} is uncovered but attributed to a reference"),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
            provenance,
            num_classes,
        })
    }

    /// Every pixel attributed to reference `k`.
    pub fn from_semantic(mask: &SemanticMask, k: usize) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            labels: mask.labels.clone(),
            provenance: vec![Provenance::Reference(k); mask.len()],
            num_classes: mask.num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn uncovered_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == UNCOVERED).count()
    }

    pub fn is_complete(&self) -> bool {
        self.uncovered_count() == 0
    }

    /// The label grid as a plain segmentation; fails while pixels are uncovered.
    pub fn to_semantic(&self) -> Result<SemanticMask> {
        if !self.is_complete() {
            return Err(Error::InvalidLabels {
                labels: vec![UNCOVERED as u32],
                reason: format!("{} pixels are still uncovered", self.uncovered_count()),
            });
        }
        SemanticMask::new(self.height, self.width, self.labels.clone(), self.num_classes)
    }

    pub fn provenance_bytes(&self) -> Vec<u8> {
        self.provenance.iter().map(|p| p.to_byte()).collect()
    }

    /// Nearest-neighbour resize of labels and provenance together.
    pub fn resize_nearest(&self, height: usize, width: usize) -> TargetMask {
        let labels = resize_nearest(&self.labels, self.height, self.width, height, width);
        let provenance = resize_nearest(&self.provenance_bytes(), self.height, self.width, height, width)
            .into_iter()
            .map(Provenance::from_byte)
            .collect();
        TargetMask {
            height,
            width,
            labels,
            provenance,
            num_classes: self.num_classes,
        }
    }
}

impl LabelGrid for TargetMask {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Reference `reference` supplies the classes `class_ids`; higher priority
/// is composited over lower.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub reference: usize,
    pub class_ids: BTreeSet<u8>,
    pub priority: i64,
}

impl RegionSpec {
    /// Priority equal to the reference index.
    pub fn new(reference: usize, class_ids: impl IntoIterator<Item = u8>) -> Self {
        Self {
            reference,
            class_ids: class_ids.into_iter().collect(),
            priority: reference as i64,
        }
    }
}

fn check_disjoint(specs: &[RegionSpec]) -> Result<()> {
    let mut owner: BTreeMap<u8, usize> = BTreeMap::new();
    let mut clashes = BTreeSet::new();
    for (i, s) in specs.iter().enumerate() {
        for &c in &s.class_ids {
            if let Some(prev) = owner.insert(c, i) {
                if prev != i {
                    clashes.insert(c as u32);
                }
            }
        }
    }
    if !clashes.is_empty() {
        return Err(Error::InvalidLabels {
            labels: clashes.into_iter().collect(),
            reason: "class claimed by more than one region".into(),
        });
    }
    Ok(())
}

/// Composes a target mask: each pixel takes the label of the
/// highest-priority reference whose own mask shows one of its claimed
/// classes there. Unclaimed pixels are [`UNCOVERED`].
pub fn build_target_mask(ref_masks: &[SemanticMask], specs: &[RegionSpec]) -> Result<TargetMask> {
    let first = ref_masks
        .first()
        .ok_or_else(|| Error::Request("at least one reference mask is required".into()))?;
    let (h, w) = (first.height, first.width);
    if let Some(bad) = ref_masks.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::Shape(format!(
            "reference masks differ in size: {h}x{w} vs {}x{}",
            bad.height, bad.width
        )));
    }
    check_disjoint(specs)?;
    if let Some(s) = specs.iter().find(|s| s.reference >= ref_masks.len()) {
        return Err(Error::Request(format!(
            "region spec names reference {} but only {} masks were given",
            s.reference,
            ref_masks.len()
        )));
    }
    let num_classes = ref_masks.iter().map(|m| m.num_classes).max().unwrap();
    let mut order: Vec<&RegionSpec> = specs.iter().collect();
    // Stable sort: equal priorities keep the given order, later wins.
    order.sort_by_key(|s| s.priority);
    let mut labels = vec![UNCOVERED; h * w];
    let mut provenance = vec![Provenance::Inpainted; h * w];
    for spec in order {
        let src = &ref_masks[spec.reference].labels;
        for (p, &l) in src.iter().enumerate() {
            if spec.class_ids.contains(&l) {
                labels[p] = l;
                provenance[p] = Provenance::Reference(spec.reference);
            }
        }
    }
    TargetMask::new(h, w, labels, provenance, num_classes)
}

/// Real-valued region weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftRegionMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub source_classes: BTreeSet<u8>,
    /// Resolution tag of the grid the mask was resampled to, e.g. `"image"`
    /// or a feature-layer / block name.
    pub source_layer: String,
}

impl SoftRegionMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "soft mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("soft mask value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
            source_classes: BTreeSet::new(),
            source_layer: "image".into(),
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value.clamp(0.0, 1.0); height * width],
            source_classes: BTreeSet::new(),
            source_layer: "image".into(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(H, W)` tensor of the values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width], self.values.clone())
    }

    /// Elementwise product, e.g. `α ⊙ β`.
    pub fn product(&self, other: &SoftRegionMask) -> Result<SoftRegionMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "mask sizes {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut out = self.clone();
        out.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a *= b);
        Ok(out)
    }
}

/// Binary indicator of the pixels labelled `k`.
pub fn region_indicator(mask: &impl LabelGrid, k: u8) -> SoftRegionMask {
    region_indicator_set(mask, &BTreeSet::from([k]))
}

/// Binary indicator of the pixels whose label is in `classes`.
pub fn region_indicator_set(mask: &impl LabelGrid, classes: &BTreeSet<u8>) -> SoftRegionMask {
    SoftRegionMask {
        height: mask.height(),
        width: mask.width(),
        values: mask
            .labels()
            .iter()
            .map(|l| if classes.contains(l) { 1.0 } else { 0.0 })
            .collect(),
        source_classes: classes.clone(),
        source_layer: "image".into(),
    }
}

/// Bicubic resample of raw values without clamping; linear in `values`.
pub fn resample_values(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let t = Tensor::from_parts(vec![1, h, w], values.to_vec());
    resample_chw(&t, out_h, out_w).into_data()
}

/// Bicubic resample to `target_h × target_w`, clamped to `[0, 1]`.
pub fn resample_mask(mask: &SoftRegionMask, target_h: usize, target_w: usize) -> SoftRegionMask {
    let values = resample_values(&mask.values, mask.height, mask.width, target_h, target_w)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    SoftRegionMask {
        height: target_h,
        width: target_w,
        values,
        source_classes: mask.source_classes.clone(),
        source_layer: format!("{target_h}x{target_w}"),
    }
}

/// Class-to-class mapping applied pointwise by [`relabel`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    #[serde(with = "pairs")]
    pub map: BTreeMap<u8, u8>,
    pub num_classes: usize,
}

/// `[from, to]` pairs, since integer map keys do not survive serde's
/// buffering inside tagged enums.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<u8, u8>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u8, u8>, D::Error> {
        Ok(Vec::<(u8, u8)>::deserialize(d)?.into_iter().collect())
    }
}

impl LabelMapping {
    pub fn identity(num_classes: usize) -> Self {
        Self {
            map: (0..num_classes as u8).map(|c| (c, c)).collect(),
            num_classes,
        }
    }
}

pub fn relabel(mask: &SemanticMask, mapping: &LabelMapping) -> Result<SemanticMask> {
    let unmapped: BTreeSet<u32> = mask
        .labels
        .iter()
        .filter(|l| !mapping.map.contains_key(l))
        .map(|&l| l as u32)
        .collect();
    if !unmapped.is_empty() {
        return Err(Error::InvalidLabels {
            labels: unmapped.into_iter().collect(),
            reason: "no mapping for these labels".into(),
        });
    }
    SemanticMask::new(
        mask.height,
        mask.width,
        mask.labels.iter().map(|l| mapping.map[l]).collect(),
        mapping.num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sm(h: usize, w: usize, l: &[u8], c: usize) -> SemanticMask {
        SemanticMask::new(h, w, l.to_vec(), c).unwrap()
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let err = SemanticMask::new(1, 3, vec![0, 3, 7], 3).unwrap_err();
        match err {
            Error::InvalidLabels { labels, .. } => assert_eq!(labels, vec![3, 7]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn priority_rule_on_two_by_two() {
        let m1 = sm(2, 2, &[1, 1, 1, 0], 3);
        let m2 = sm(2, 2, &[2, 0, 0, 0], 3);
        let t = build_target_mask(&[m1, m2], &[RegionSpec::new(0, [1]), RegionSpec::new(1, [2])])
            .unwrap();
        assert_eq!(t.labels(), &[2, 1, 1, UNCOVERED]);
        assert_eq!(
            t.provenance(),
            &[
                Provenance::Reference(1),
                Provenance::Reference(0),
                Provenance::Reference(0),
                Provenance::Inpainted
            ]
        );
    }

    #[test]
    fn overlapping_claim_goes_to_higher_priority() {
        let face = sm(1, 1, &[1], 3);
        let hair = sm(1, 1, &[2], 3);
        let t = build_target_mask(&[face, hair], &[RegionSpec::new(0, [0, 1]), RegionSpec::new(1, [2])])
            .unwrap();
        assert_eq!(t.labels(), &[2]);
    }

    #[test]
    fn single_full_reference_reproduces_itself() {
        let m = sm(2, 3, &[0, 1, 2, 2, 1, 0], 3);
        let t = build_target_mask(std::slice::from_ref(&m), &[RegionSpec::new(0, [0, 1, 2])]).unwrap();
        assert_eq!(t.to_semantic().unwrap(), m);
    }

    #[test]
    fn size_mismatch_and_overlapping_specs_fail() {
        let a = sm(2, 2, &[0; 4], 3);
        let b = sm(1, 2, &[0; 2], 3);
        assert!(build_target_mask(&[a.clone(), b], &[RegionSpec::new(0, [0])]).is_err());
        assert!(build_target_mask(
            &[a.clone(), a],
            &[RegionSpec::new(0, [0, 1]), RegionSpec::new(1, [1])]
        )
        .is_err());
    }

    #[test]
    fn indicator_examples() {
        let m = sm(2, 2, &[1, 2, 2, 2], 3);
        assert_eq!(region_indicator(&m, 2).values(), &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(region_indicator(&m, 0).values(), &[0.0; 4]);
        let mut total = vec![0.0; 4];
        for k in 0..3 {
            for (t, v) in total.iter_mut().zip(region_indicator(&m, k).values()) {
                *t += v;
            }
        }
        assert_eq!(total, vec![1.0; 4]);
    }

    #[test]
    fn resample_constant_and_checkerboard() {
        let ones = SoftRegionMask::constant(5, 7, 1.0);
        for (h, w) in [(1, 1), (3, 2), (9, 13)] {
            assert!(resample_mask(&ones, h, w).values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
        let cb = SoftRegionMask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((resample_mask(&cb, 1, 1).values()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resample_top_half_four_to_two() {
        // Rows 0-1 are ones. Each output row samples source position 0.5
        // (or 2.5) with taps at offsets -1, 0, 1, 2 and weights
        // (-1/16, 9/16, 9/16, -1/16); edge clamping repeats row 0 (row 3).
        // Top: -1/16 + 9/16 + 9/16 - 0 = 1.0625 -> 1. Bottom: -1/16 -> 0.
        let mut v = vec![1.0; 8];
        v.extend(vec![0.0; 8]);
        let m = SoftRegionMask::new(4, 4, v.clone()).unwrap();
        let raw = resample_values(&v, 4, 4, 2, 2);
        for x in 0..2 {
            assert!((raw[x] - 1.0625).abs() < 1e-12);
            assert!((raw[2 + x] + 0.0625).abs() < 1e-12);
        }
        assert_eq!(resample_mask(&m, 2, 2).values(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn relabel_cases() {
        let m = sm(1, 3, &[0, 1, 2], 3);
        assert_eq!(relabel(&m, &LabelMapping::identity(3)).unwrap(), m);
        let all_one = LabelMapping {
            map: [(0, 1), (1, 1), (2, 1)].into(),
            num_classes: 2,
        };
        assert_eq!(relabel(&m, &all_one).unwrap().labels(), &[1, 1, 1]);
        let partial = LabelMapping {
            map: [(0, 0)].into(),
            num_classes: 1,
        };
        match relabel(&m, &partial).unwrap_err() {
            Error::InvalidLabels { labels, .. } => assert_eq!(labels, vec![1, 2]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn nearest_resize_picks_covering_pixel() {
        let m = sm(2, 2, &[0, 1, 2, 0], 3);
        let up = m.resize_nearest(4, 4);
        assert_eq!(
            up.labels(),
            &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 0, 0, 2, 2, 0, 0]
        );
        assert_eq!(up.resize_nearest(2, 2), m);
    }
}
