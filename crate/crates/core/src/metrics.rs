//! Reconstruction-quality metrics over aligned image pairs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::FeatureExtractor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{extract_features, lpips};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Value range of `[-1, 1]` images.
pub const DATA_RANGE: f64 = 2.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub rmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub vgg_dist: f64,
    pub lpips: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<PairMetrics>,
    pub mean: PairMetrics,
    pub fid: f64,
}

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let (x, y) = (a.tensor().data(), b.tensor().data());
    let mse = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(mse.sqrt())
}

/// `20·log10(range / rmse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (20.0 * (DATA_RANGE / rmse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_rmse(rmse(a, b)?))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|t| g[t] * x[y * w + xo + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|t| g[t] * rows[(yo + t) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over channels and window positions (11×11 Gaussian window,
/// σ = 1.5, k1 = 0.01, k2 = 0.03, range 2). Images smaller than the window
/// use a window truncated to the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let (h, w) = (a.height(), a.width());
    let mut g = gaussian_window();
    let k = SSIM_WINDOW.min(h).min(w);
    if k < SSIM_WINDOW {
        let off = (SSIM_WINDOW - k) / 2;
        g = g[off..off + k].to_vec();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
    }
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x = &a.tensor().data()[ch * hw..(ch + 1) * hw];
        let y = &b.tensor().data()[ch * hw..(ch + 1) * hw];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(x, h, w, &g);
        let (my, _, _) = filter_valid(y, h, w, &g);
        let (sxx, _, _) = filter_valid(&xx, h, w, &g);
        let (syy, _, _) = filter_valid(&yy, h, w, &g);
        let (sxy, _, _) = filter_valid(&xy, h, w, &g);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over style layers of the mean squared feature difference.
pub fn vgg_distance(ex: &dyn FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let fa = extract_features(ex, a)?;
    let fb = extract_features(ex, b)?;
    let n = fa.style.len().max(1) as f64;
    Ok(fa
        .style
        .iter()
        .zip(&fb.style)
        .map(|(x, y)| {
            x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64
        })
        .sum::<f64>()
        / n)
}

/// Globally average-pooled deepest style-layer activations.
pub fn pooled_features(ex: &dyn FeatureExtractor, img: &Image) -> Result<Vec<f64>> {
    let f = extract_features(ex, img)?;
    let last = f
        .style
        .last()
        .ok_or_else(|| Error::Config("extractor has no style layers".into()))?;
    let s = last.shape();
    let hw = s[1] * s[2];
    Ok(last.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect())
}

fn mean_cov(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = feats[0].len();
    let n = feats.len();
    let mut mu = DVector::zeros(d);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for f in feats {
            let c = DVector::from_column_slice(f) - &mu;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Request("FID needs at least one image per set".into()));
    }
    let (mu_a, cov_a) = mean_cov(a);
    let (mu_b, cov_b) = mean_cov(b);
    let diff = (&mu_a - &mu_b).norm_squared();
    let sa = psd_sqrt(&cov_a);
    let inner = &sa * &cov_b * &sa;
    let cross = psd_sqrt(&inner).trace();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

pub fn evaluate_pairs(
    originals: &[Image],
    reconstructions: &[Image],
    ex: &dyn FeatureExtractor,
) -> Result<MetricReport> {
    if originals.len() != reconstructions.len() {
        return Err(Error::Request(format!(
            "{} originals but {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::Request("no image pairs".into()));
    }
    let per_image = originals
        .par_iter()
        .zip(reconstructions)
        .map(|(a, b)| {
            let r = rmse(a, b)?;
            Ok(PairMetrics {
                rmse: r,
                psnr_db: psnr_from_rmse(r),
                ssim: ssim(a, b)?,
                vgg_dist: vgg_distance(ex, a, b)?,
                lpips: lpips(ex, a, b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let mut mean = PairMetrics::default();
    for p in &per_image {
        mean.rmse += p.rmse / n;
        mean.psnr_db += p.psnr_db / n;
        mean.ssim += p.ssim / n;
        mean.vgg_dist += p.vgg_dist / n;
        mean.lpips += p.lpips / n;
    }
    let fa = originals
        .par_iter()
        .map(|i| pooled_features(ex, i))
        .collect::<Result<Vec<_>>>()?;
    let fb = reconstructions
        .par_iter()
        .map(|i| pooled_features(ex, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        per_image,
        mean,
        fid: frechet_distance(&fa, &fb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images_closed_form() {
        let a = Image::constant(16, 16, 0.2);
        let b = Image::constant(16, 16, 0.3);
        let r = rmse(&a, &b).unwrap();
        assert!((r - 0.1).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 20f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let data = (0..3 * 20 * 20).map(|i| ((i as f64) * 0.13).sin()).collect();
        let img = Image::from_tensor(crate::tensor::Tensor::new(vec![3, 20, 20], data).unwrap()).unwrap();
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let other = Image::constant(20, 20, 0.0);
        let s = ssim(&img, &other).unwrap();
        assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn frechet_distance_of_shifted_set() {
        let a = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![1.0, 3.0]];
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 1.0, v[1] - 2.0]).collect();
        // Same covariance, mean shifted by (1, -2).
        assert!((frechet_distance(&a, &b).unwrap() - 5.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
    }
}
