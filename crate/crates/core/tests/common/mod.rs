#![allow(dead_code)]

use std::sync::OnceLock;

use maskblend_core::backend::toy::{make_toy_world, ToyWorld, ToyWorldConfig};
use maskblend_core::masks::{fill_uncovered_nearest, LabelGrid, Provenance, SemanticMask, TargetMask, UNCOVERED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const U: u8 = UNCOVERED;

/// The seed-42 toy world, built once per test binary.
pub fn world() -> &'static ToyWorld {
    static W: OnceLock<ToyWorld> = OnceLock::new();
    W.get_or_init(|| make_toy_world(&ToyWorldConfig::default()).expect("seed 42 passes the smoke check"))
}

/// Moves the pixels of `class` by `(dy, dx)`; vacated pixels are filled
/// from the nearest remaining label.
pub fn shifted_target(own: &SemanticMask, class: u8, dy: isize, dx: isize) -> TargetMask {
    let (h, w) = (own.height(), own.width());
    let mut labels = own.labels().to_vec();
    let mut prov = vec![Provenance::Reference(0); h * w];
    for p in 0..h * w {
        if labels[p] == class {
            labels[p] = U;
            prov[p] = Provenance::Inpainted;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y as isize - dy, x as isize - dx);
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w && own.get(sy as usize, sx as usize) == class {
                labels[y * w + x] = class;
                prov[y * w + x] = Provenance::Reference(1);
            }
        }
    }
    let t = TargetMask::new(h, w, labels, prov, own.num_classes()).unwrap();
    fill_uncovered_nearest(&t).unwrap()
}

/// Distinct coordinates of a tensor with `len` entries.
pub fn sample_coords(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(n);
    while out.len() < n.min(len) {
        let i = rng.gen_range(0..len);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Norm-wise relative error between analytic and central-difference
/// gradients over the sampled coordinates of `x`.
pub fn fd_rel_error(x: &[f64], analytic: &[f64], coords: &[usize], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut num = 0.0;
    let (mut na, mut nn) = (0.0, 0.0);
    let mut xp = x.to_vec();
    for &i in coords {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let g = (fp - fm) / (2.0 * h);
        num += (g - analytic[i]).powi(2);
        na += analytic[i].powi(2);
        nn += g * g;
    }
    num.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300)
}

/// Independent simplex projection: exhaustive search on a grid of step
/// `1e-2`, then two finer grids (`1e-4`, `1e-6`) around the incumbent.
pub fn grid_project(v: &[f64]) -> Vec<f64> {
    let k = v.len();
    let dist = |p: &[f64]| p.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mut best: Vec<f64> = vec![1.0 / k as f64; k];
    let mut lo = vec![0.0; k];
    let mut hi = vec![1.0; k];
    for step in [1e-2f64, 1e-4, 1e-6] {
        let mut cand = best.clone();
        let mut best_d = dist(&best);
        let axes: Vec<Vec<f64>> = (0..k - 1)
            .map(|i| {
                let n = ((hi[i] - lo[i]) / step).round() as i64;
                (0..=n).map(|j| lo[i] + j as f64 * step).collect()
            })
            .collect();
        let mut idx = vec![0usize; k - 1];
        loop {
            let head: f64 = (0..k - 1).map(|i| axes[i][idx[i]]).sum();
            let last = 1.0 - head;
            if last >= -1e-12 {
                for i in 0..k - 1 {
                    cand[i] = axes[i][idx[i]];
                }
                cand[k - 1] = last.max(0.0);
                let d = dist(&cand);
                if d < best_d {
                    best_d = d;
                    best.copy_from_slice(&cand);
                }
            }
            let mut i = 0;
            loop {
                if i == k - 1 {
                    break;
                }
                idx[i] += 1;
                if idx[i] < axes[i].len() {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
            if i == k - 1 {
                break;
            }
        }
        for i in 0..k {
            lo[i] = (best[i] - step).max(0.0);
            hi[i] = (best[i] + step).min(1.0);
        }
    }
    best
}

/// Hand-built hair-transfer fixture in task labels: hair reference,
/// identity reference, the composed target and its inpainted form.
pub struct MaskFixture {
    pub size: usize,
    pub hair: Vec<u8>,
    pub identity: Vec<u8>,
    pub built: Vec<u8>,
    pub built_provenance: Vec<Provenance>,
    pub inpainted: Vec<u8>,
}

#[rustfmt::skip]
pub fn fixture_4x4() -> MaskFixture {
    use Provenance::{Inpainted as I, Reference as R};
    MaskFixture {
        size: 4,
        hair: vec![
            2, 2, 2, 2,
            2, 1, 1, 2,
            2, 1, 1, 2,
            0, 0, 0, 0,
        ],
        identity: vec![
            0, 2, 2, 0,
            0, 2, 2, 0,
            0, 1, 1, 0,
            0, 1, 1, 0,
        ],
        built: vec![
            2, 2, 2, 2,
            2, U, U, 2,
            2, 1, 1, 2,
            0, 1, 1, 0,
        ],
        built_provenance: vec![
            R(1), R(1), R(1), R(1),
            R(1), I,    I,    R(1),
            R(1), R(0), R(0), R(1),
            R(0), R(0), R(0), R(0),
        ],
        // The hole touches background and face at distance 1; the tie
        // goes to background, so hair from the layer behind shows through.
        inpainted: vec![
            2, 2, 2, 2,
            2, 2, 2, 2,
            2, 1, 1, 2,
            0, 1, 1, 0,
        ],
    }
}

#[rustfmt::skip]
pub fn fixture_8x8() -> MaskFixture {
    use Provenance::{Inpainted as I, Reference as R};
    let (a, b) = (R(0), R(1));
    MaskFixture {
        size: 8,
        hair: vec![
            2, 2, 2, 2, 2, 2, 2, 2,
            2, 2, 2, 2, 2, 2, 2, 2,
            2, 2, 1, 1, 1, 1, 2, 2,
            0, 0, 1, 1, 1, 1, 0, 0,
            0, 0, 1, 1, 1, 1, 0, 0,
            0, 0, 1, 1, 1, 1, 0, 0,
            0, 0, 0, 1, 1, 0, 0, 0,
            0, 0, 0, 1, 1, 0, 0, 0,
        ],
        identity: vec![
            0, 0, 2, 2, 2, 2, 0, 0,
            0, 2, 2, 2, 2, 2, 2, 0,
            0, 2, 2, 2, 2, 2, 2, 0,
            0, 0, 2, 2, 2, 2, 0, 0,
            0, 0, 1, 1, 1, 1, 0, 0,
            0, 0, 1, 1, 1, 1, 0, 0,
            0, 0, 0, 1, 1, 0, 0, 0,
            0, 0, 0, 1, 1, 0, 0, 0,
        ],
        built: vec![
            2, 2, 2, 2, 2, 2, 2, 2,
            2, 2, 2, 2, 2, 2, 2, 2,
            2, 2, U, U, U, U, 2, 2,
            0, 0, U, U, U, U, 0, 0,
            0, 0, 1, 1, 1, 1, 0, 0,
            0, 0, 1, 1, 1, 1, 0, 0,
            0, 0, 0, 1, 1, 0, 0, 0,
            0, 0, 0, 1, 1, 0, 0, 0,
        ],
        built_provenance: vec![
            b, b, b, b, b, b, b, b,
            b, b, b, b, b, b, b, b,
            b, b, I, I, I, I, b, b,
            a, a, I, I, I, I, a, a,
            a, a, a, a, a, a, a, a,
            a, a, a, a, a, a, a, a,
            a, a, a, a, a, a, a, a,
            a, a, a, a, a, a, a, a,
        ],
        // Arrival times worked out by hand: (2,2) reaches background at
        // ≈1.55 before face at 2, then takes hair from the layer behind;
        // (2,3) reaches face at 2 before background at ≈2.55; (3,2) ties
        // face and background at 1, and background beats hair (≈1.71).
        inpainted: vec![
            2, 2, 2, 2, 2, 2, 2, 2,
            2, 2, 2, 2, 2, 2, 2, 2,
            2, 2, 2, 1, 1, 2, 2, 2,
            0, 0, 0, 1, 1, 0, 0, 0,
            0, 0, 1, 1, 1, 1, 0, 0,
            0, 0, 1, 1, 1, 1, 0, 0,
            0, 0, 0, 1, 1, 0, 0, 0,
            0, 0, 0, 1, 1, 0, 0, 0,
        ],
    }
}

impl MaskFixture {
    pub fn masks(&self) -> (SemanticMask, SemanticMask) {
        let n = self.size;
        (
            SemanticMask::new(n, n, self.identity.clone(), 3).unwrap(),
            SemanticMask::new(n, n, self.hair.clone(), 3).unwrap(),
        )
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
