//! Filling unclaimed target-mask pixels.
//!
//! Labels are propagated with the fast marching method: for each candidate
//! label an arrival-time field is grown from that label's pixels through the
//! unknown region, and each unknown pixel takes the label that arrives first
//! (ties go to the lowest label).

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::{task, LabelGrid, SemanticMask, TargetMask, UNCOVERED};
use crate::error::{Error, Result};

#[derive(PartialEq)]
struct Key(f64, usize);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// First-order fast marching on a 4-connected grid with unit spacing.
/// Returns arrival times (infinite where unreachable).
fn arrival_times(h: usize, w: usize, sources: &[bool], passable: &[bool]) -> Vec<f64> {
    let n = h * w;
    let mut t = vec![f64::INFINITY; n];
    let mut frozen = vec![false; n];
    let mut heap = BinaryHeap::new();
    for p in 0..n {
        if sources[p] {
            t[p] = 0.0;
            heap.push(Reverse(Key(0.0, p)));
        }
    }
    let accepted = |t: &[f64], frozen: &[bool], q: Option<usize>| match q {
        Some(q) if frozen[q] => t[q],
        _ => f64::INFINITY,
    };
    while let Some(Reverse(Key(_, p))) = heap.pop() {
        if frozen[p] {
            continue;
        }
        frozen[p] = true;
        let (y, x) = (p / w, p % w);
        let neighbours = [
            (y > 0).then(|| p - w),
            (y + 1 < h).then(|| p + w),
            (x > 0).then(|| p - 1),
            (x + 1 < w).then(|| p + 1),
        ];
        for q in neighbours.into_iter().flatten() {
            if frozen[q] || !passable[q] {
                continue;
            }
            let (qy, qx) = (q / w, q % w);
            let a = accepted(&t, &frozen, (qx > 0).then(|| q - 1))
                .min(accepted(&t, &frozen, (qx + 1 < w).then(|| q + 1)));
            let b = accepted(&t, &frozen, (qy > 0).then(|| q - w))
                .min(accepted(&t, &frozen, (qy + 1 < h).then(|| q + w)));
            let cand = if (a - b).abs() >= 1.0 || !a.is_finite() || !b.is_finite() {
                a.min(b) + 1.0
            } else {
                (a + b + (2.0 - (a - b) * (a - b)).sqrt()) / 2.0
            };
            if cand < t[q] {
                t[q] = cand;
                heap.push(Reverse(Key(cand, q)));
            }
        }
    }
    t
}

/// Replaces every `unknown` pixel of `labels` with the candidate label
/// whose pixels are nearest by fast-marching arrival time. Propagation runs
/// through the unknown region; unknown pixels walled off from every
/// candidate fall back to propagation across the whole grid, and to
/// `fallback` if no candidate label is present at all.
pub fn fast_marching_fill(
    height: usize,
    width: usize,
    labels: &[u8],
    unknown: u8,
    candidates: &[u8],
    fallback: u8,
) -> Vec<u8> {
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    let unknown_px: Vec<bool> = labels.iter().map(|&l| l == unknown).collect();
    if !unknown_px.iter().any(|&u| u) {
        return labels.to_vec();
    }
    let assign = |passable: &dyn Fn(usize) -> bool, out: &mut Vec<u8>, pending: &[bool]| {
        let mut best = vec![(f64::INFINITY, fallback); labels.len()];
        for &c in &cands {
            let sources: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let pass: Vec<bool> = (0..labels.len()).map(|p| sources[p] || passable(p)).collect();
            let t = arrival_times(height, width, &sources, &pass);
            for p in 0..labels.len() {
                if pending[p] && t[p] < best[p].0 {
                    best[p] = (t[p], c);
                }
            }
        }
        let mut still = vec![false; labels.len()];
        for p in 0..labels.len() {
            if pending[p] {
                if best[p].0.is_finite() {
                    out[p] = best[p].1;
                } else {
                    still[p] = true;
                }
            }
        }
        still
    };
    let mut out = labels.to_vec();
    let still = assign(&|p| unknown_px[p], &mut out, &unknown_px);
    if still.iter().any(|&s| s) {
        let still = assign(&|_| true, &mut out, &still);
        for (o, s) in out.iter_mut().zip(still) {
            if s {
                *o = fallback;
            }
        }
    }
    out
}

/// Fills uncovered pixels from the nearest covered label of any class.
pub fn fill_uncovered_nearest(mask: &TargetMask) -> Result<TargetMask> {
    if mask.is_complete() {
        return Ok(mask.clone());
    }
    let cands: Vec<u8> = (0..mask.num_classes() as u8).collect();
    let filled = fast_marching_fill(mask.height(), mask.width(), mask.labels(), UNCOVERED, &cands, 0);
    TargetMask::new(
        mask.height(),
        mask.width(),
        filled,
        mask.provenance().to_vec(),
        mask.num_classes(),
    )
}

/// Fills the uncovered pixels of a hair-compositing target mask. All masks
/// use the {background, other, hair} labels of [`task`].
///
/// A hair layer is built from the hair reference (hair where it has hair,
/// background where both references are background, the rest inpainted
/// between those two labels). The other reference, with its hair inpainted
/// away, is laid over it wherever it is not background, and hair is forced
/// back wherever the hair reference has hair. Uncovered pixels take their
/// label from this composite; covered pixels are left as they are.
pub fn inpaint_target_mask(
    mask: &TargetMask,
    hair_mask: &SemanticMask,
    other_mask: &SemanticMask,
) -> Result<TargetMask> {
    if mask.is_complete() {
        return Ok(mask.clone());
    }
    let (h, w) = (mask.height(), mask.width());
    for m in [hair_mask, other_mask] {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "reference mask {}x{} does not match target {h}x{w}",
                m.height(),
                m.width()
            )));
        }
        if m.num_classes() != task::NUM_CLASSES {
            return Err(Error::Config(format!(
                "inpainting expects {}-class task labels, got {} classes",
                task::NUM_CLASSES,
                m.num_classes()
            )));
        }
    }
    let (bg, hair) = (task::BACKGROUND, task::HAIR);
    let hair_l = hair_mask.labels();
    let other_l = other_mask.labels();

    let behind: Vec<u8> = hair_l
        .iter()
        .zip(other_l)
        .map(|(&a, &b)| {
            if a == hair {
                hair
            } else if a == bg && b == bg {
                bg
            } else {
                UNCOVERED
            }
        })
        .collect();
    let behind = fast_marching_fill(h, w, &behind, UNCOVERED, &[bg, hair], bg);

    let middle: Vec<u8> = other_l
        .iter()
        .map(|&l| if l == hair { UNCOVERED } else { l })
        .collect();
    let middle = fast_marching_fill(h, w, &middle, UNCOVERED, &[bg, task::OTHER], bg);

    let composite: Vec<u8> = (0..h * w)
        .map(|p| {
            if hair_l[p] == hair {
                hair
            } else if middle[p] != bg {
                middle[p]
            } else {
                behind[p]
            }
        })
        .collect();

    let labels = mask
        .labels()
        .iter()
        .zip(&composite)
        .map(|(&l, &c)| if l == UNCOVERED { c } else { l })
        .collect();
    TargetMask::new(h, w, labels, mask.provenance().to_vec(), mask.num_classes())
}
