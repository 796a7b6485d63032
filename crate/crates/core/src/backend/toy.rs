//! Seeded miniature generator, segmenter and feature extractor.
//!
//! The toy networks share the architectures of the full-scale adapters and
//! are built through the same archive loaders, so a toy world can be written
//! to disk and loaded back as if it were a set of pretrained weights.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    argmax_labels, segment_logits, synth_full, Backend, BackendConfig, BlockSpec, ConvFeatureExtractor,
    ConvSegmenter, ExtractorArch, GeneratorArch, SegmenterArch, StageSpec, StyleGenerator,
};
use crate::archive::{Archive, Dtype, WEIGHTS_MAGIC};
use crate::error::{Error, Result};
use crate::tensor::{GridShape, Tensor};

/// Minimum share of pixels each class must cover on the zero-code image.
pub const SMOKE_MIN_CLASS_FRACTION: f64 = 0.01;

/// Separation of the toy classifier logits (standard deviation of the
/// centred class scores on the calibration images).
const SEGMENTER_LOGIT_SCALE: f64 = 6.0;
const CONST_SIZE: usize = 8;
/// Largest spatial frequency of the constant input, in half-cycles across
/// the grid.
const CONST_MAX_FREQ: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyWorldConfig {
    pub seed: u64,
    pub num_style_blocks: usize,
    pub output_resolution: usize,
    pub num_classes: usize,
    pub style_dim: usize,
    /// Scale of the frozen per-block noise maps; zero disables noise.
    pub noise_strength: f64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_style_blocks: 8,
            output_resolution: 32,
            num_classes: 3,
            style_dim: 16,
            noise_strength: 0.0,
        }
    }
}

impl ToyWorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// The constant input is 8×8 (or the output size, if smaller);
    /// upsampling happens at blocks 1, 3, 5, … until the output resolution
    /// is reached; channel width shrinks with resolution.
    pub fn generator_arch(&self) -> Result<GeneratorArch> {
        let res = self.output_resolution;
        if res < 4 || !res.is_power_of_two() {
            return Err(Error::Config(format!(
                "toy resolution must be a power of two >= 4, got {res}"
            )));
        }
        let const_size = CONST_SIZE.min(res);
        let ups = (res / const_size).trailing_zeros() as usize;
        if self.num_style_blocks < (2 * ups).max(2) {
            return Err(Error::Config(format!(
                "{} style blocks cannot reach resolution {res} (need >= {})",
                self.num_style_blocks,
                (2 * ups).max(2)
            )));
        }
        let channels = |size: usize| match size {
            0..=8 => 16,
            9..=16 => 12,
            _ => 8,
        };
        let mut size = const_size;
        let mut blocks = Vec::new();
        for b in 0..self.num_style_blocks {
            let upsample = b % 2 == 1 && size < res;
            if upsample {
                size *= 2;
            }
            blocks.push(BlockSpec {
                out_channels: channels(size),
                upsample,
            });
        }
        Ok(GeneratorArch {
            style_dim: self.style_dim,
            const_channels: channels(const_size),
            const_size,
            mapping_layers: 2,
            blocks,
        })
    }
}

/// Normal samples rounded to f32 precision so that the weights survive an
/// f32 archive round trip bit-exactly.
fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            (v * std) as f32 as f64
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Random low-frequency cosines, one per channel. A white-noise constant
/// gives speckled images whose segmentations have no coherent regions.
fn fourier_constant(rng: &mut ChaCha8Rng, shape: GridShape) -> Tensor {
    use std::f64::consts::{PI, SQRT_2, TAU};
    let mut data = Vec::with_capacity(shape.numel());
    for _ in 0..shape.channels {
        let fx = rng.gen_range(-CONST_MAX_FREQ..CONST_MAX_FREQ);
        let fy = rng.gen_range(-CONST_MAX_FREQ..CONST_MAX_FREQ);
        let phase = rng.gen_range(0.0..TAU);
        for y in 0..shape.height {
            for x in 0..shape.width {
                let u = (x as f64 + 0.5) / shape.width as f64 * 2.0 - 1.0;
                let v = (y as f64 + 0.5) / shape.height as f64 * 2.0 - 1.0;
                data.push(((PI * (fx * u + fy * v) + phase).cos() * SQRT_2) as f32 as f64);
            }
        }
    }
    Tensor::from_parts(shape.dims().to_vec(), data)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(lo..hi) as f32 as f64)
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn f32_round(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

pub struct ToyWorld {
    pub config: ToyWorldConfig,
    pub generator: Arc<StyleGenerator>,
    pub segmenter: Arc<ConvSegmenter>,
    pub extractor: Arc<ConvFeatureExtractor>,
}

impl ToyWorld {
    pub fn backend(&self) -> Backend {
        Backend {
            generator: self.generator.clone(),
            segmenter: self.segmenter.clone(),
            extractor: self.extractor.clone(),
        }
    }

    /// Writes the three weight archives plus a `backend.json` pointing at
    /// them into `dir`, and returns that config.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<BackendConfig> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.generator
            .archive()
            .write(dir.join("generator.bin"), &WEIGHTS_MAGIC)?;
        self.segmenter
            .archive()
            .write(dir.join("segmenter.bin"), &WEIGHTS_MAGIC)?;
        self.extractor
            .archive()
            .write(dir.join("extractor.bin"), &WEIGHTS_MAGIC)?;
        let cfg = BackendConfig::Archive {
            generator: "generator.bin".into(),
            segmenter: "segmenter.bin".into(),
            extractor: "extractor.bin".into(),
        };
        std::fs::write(dir.join("backend.json"), serde_json::to_vec_pretty(&cfg)?)?;
        Ok(cfg)
    }

    /// A W+ code drawn from the mapped latent distribution: one mapped
    /// vector, truncated toward the mean by `psi`, plus independent per-row
    /// jitter of standard deviation `jitter`.
    pub fn sample_wplus(&self, seed: u64, psi: f64, jitter: f64) -> Tensor {
        sample_wplus(&self.generator, seed, psi, jitter)
    }
}

pub fn sample_wplus(gen: &StyleGenerator, seed: u64, psi: f64, jitter: f64) -> Tensor {
    use super::Generator;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = gen.style_dim();
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let w = gen.map_latent(&z);
    let mean = gen.mean_latent().data();
    let n = gen.num_style_blocks();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            data.push(mean[j] + psi * (w[j] - mean[j]) + jitter * e);
        }
    }
    Tensor::from_parts(vec![n, d], data)
}

fn build_generator(cfg: &ToyWorldConfig, rng: &mut ChaCha8Rng) -> Result<StyleGenerator> {
    let arch = cfg.generator_arch()?;
    let d = arch.style_dim;
    let shapes = arch.block_shapes();
    let mut ar = Archive::new(serde_json::json!({
        "kind": "generator",
        "architecture": arch,
    }));
    ar.push("const", Dtype::F32, fourier_constant(rng, shapes[0]));
    for i in 0..arch.mapping_layers {
        let w = randn(rng, &[d, d], (1.0 / d as f64).sqrt());
        let b = Tensor::zeros(&[d]);
        ar.push(format!("mapping.{i}.weight"), Dtype::F32, w);
        ar.push(format!("mapping.{i}.bias"), Dtype::F32, b);
    }
    for (b, spec) in arch.blocks.iter().enumerate() {
        let cin = shapes[b].channels;
        let out = shapes[b + 1];
        ar.push(
            format!("blocks.{b}.affine.weight"),
            Dtype::F32,
            randn(rng, &[cin, d], (1.0 / d as f64).sqrt()),
        );
        ar.push(format!("blocks.{b}.affine.bias"), Dtype::F32, Tensor::full(&[cin], 1.0));
        ar.push(
            format!("blocks.{b}.conv.weight"),
            Dtype::F32,
            randn(rng, &[spec.out_channels, cin, 3, 3], 1.0),
        );
        ar.push(
            format!("blocks.{b}.bias"),
            Dtype::F32,
            randn(rng, &[spec.out_channels], 0.1),
        );
        ar.push(
            format!("blocks.{b}.noise"),
            Dtype::F32,
            randn(rng, &[out.height, out.width], 1.0),
        );
        ar.push(
            format!("blocks.{b}.noise_strength"),
            Dtype::F32,
            f32_round(&Tensor::full(&[1], cfg.noise_strength)),
        );
    }
    let last = shapes.last().unwrap().channels;
    ar.push(
        "to_rgb.affine.weight",
        Dtype::F32,
        randn(rng, &[last, d], (1.0 / d as f64).sqrt()),
    );
    ar.push("to_rgb.affine.bias", Dtype::F32, Tensor::full(&[last], 1.0));
    ar.push(
        "to_rgb.weight",
        Dtype::F32,
        randn(rng, &[3, last, 1, 1], 0.6 / (last as f64).sqrt()),
    );
    ar.push("to_rgb.bias", Dtype::F32, Tensor::zeros(&[3]));

    // Mean of the mapped distribution, estimated from a fixed sample.
    ar.push("latent_mean", Dtype::F32, Tensor::zeros(&[d]));
    let provisional = StyleGenerator::from_archive(ar.clone())?;
    let mut mean_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d65_616e);
    let samples = 2048;
    let mut mean = vec![0.0; d];
    for _ in 0..samples {
        let z: Vec<f64> = (0..d).map(|_| mean_rng.sample(StandardNormal)).collect();
        for (m, v) in mean.iter_mut().zip(provisional.map_latent(&z)) {
            *m += v / samples as f64;
        }
    }
    let mut final_ar = Archive::new(ar.metadata.clone());
    for name in ar.names() {
        if name != "latent_mean" {
            final_ar.push(name, Dtype::F32, ar.get(name)?.clone());
        }
    }
    final_ar.push(
        "latent_mean",
        Dtype::F32,
        f32_round(&Tensor::from_parts(vec![d], mean)),
    );
    StyleGenerator::from_archive(final_ar)
}

fn build_segmenter(
    cfg: &ToyWorldConfig,
    rng: &mut ChaCha8Rng,
    gen: &StyleGenerator,
) -> Result<ConvSegmenter> {
    let arch = SegmenterArch {
        num_classes: cfg.num_classes,
        input_resolution: cfg.output_resolution,
        hidden: vec![(8, 3), (8, 3)],
    };
    let mut layers = Vec::new();
    let mut cin = 3;
    for &(cout, k) in &arch.hidden {
        let fan_in = (cin * k * k) as f64;
        layers.push((randn(rng, &[cout, cin, k, k], 1.5 / fan_in.sqrt()), randn(rng, &[cout], 0.2)));
        cin = cout;
    }
    let classifier = randn(rng, &[cfg.num_classes, cin, 1, 1], 1.0 / (cin as f64).sqrt());

    let assemble = |classifier: &Tensor, bias: &Tensor| {
        let mut ar = Archive::new(serde_json::json!({
            "kind": "segmenter",
            "architecture": arch,
        }));
        for (i, (w, b)) in layers.iter().enumerate() {
            ar.push(format!("layers.{i}.weight"), Dtype::F32, w.clone());
            ar.push(format!("layers.{i}.bias"), Dtype::F32, b.clone());
        }
        let i = layers.len();
        ar.push(format!("layers.{i}.weight"), Dtype::F32, classifier.clone());
        ar.push(format!("layers.{i}.bias"), Dtype::F32, bias.clone());
        ConvSegmenter::from_archive(ar)
    };

    // Calibrate the classifier on generator samples: centre each class score
    // and scale the score spread so classes are balanced and confident.
    let provisional = assemble(&classifier, &Tensor::zeros(&[cfg.num_classes]))?;
    let mut calib = vec![synth_full(gen, &zero_code(gen))?];
    let world_gen_seed = cfg.seed.wrapping_mul(31).wrapping_add(7);
    for i in 0..8 {
        calib.push(synth_full(gen, &sample_wplus(gen, world_gen_seed + i, 0.7, 0.0))?);
    }
    let c = cfg.num_classes;
    let mut sums = vec![0.0; c];
    let mut count = 0.0;
    let mut logits_all = Vec::new();
    for img in &calib {
        let z = segment_logits(&provisional, img)?;
        let hw = z.shape()[1] * z.shape()[2];
        for k in 0..c {
            sums[k] += z.data()[k * hw..(k + 1) * hw].iter().sum::<f64>();
        }
        count += hw as f64;
        logits_all.push(z);
    }
    let means: Vec<f64> = sums.iter().map(|s| s / count).collect();
    let mut var = 0.0;
    for z in &logits_all {
        let hw = z.shape()[1] * z.shape()[2];
        for k in 0..c {
            var += z.data()[k * hw..(k + 1) * hw]
                .iter()
                .map(|v| (v - means[k]).powi(2))
                .sum::<f64>();
        }
    }
    let std = (var / (count * c as f64)).sqrt().max(1e-6);
    let gain = SEGMENTER_LOGIT_SCALE / std;
    let classifier = f32_round(&classifier.map(|v| v * gain));
    let bias = f32_round(&Tensor::from_parts(
        vec![c],
        means.iter().map(|m| -m * gain).collect(),
    ));
    assemble(&classifier, &bias)
}

fn build_extractor(rng: &mut ChaCha8Rng) -> Result<ConvFeatureExtractor> {
    let stage = |name: &str, out_channels, convs, pool_before| StageSpec {
        name: name.into(),
        out_channels,
        convs,
        pool_before,
    };
    let arch = ExtractorArch {
        stages: vec![
            stage("relu1_2", 8, 2, false),
            stage("relu2_2", 12, 1, true),
            stage("relu3_3", 16, 1, true),
            stage("relu4_3", 16, 1, true),
        ],
        style_layers: vec![
            "relu1_2".into(),
            "relu2_2".into(),
            "relu3_3".into(),
            "relu4_3".into(),
        ],
        perceptual_layers: vec!["relu1_2".into(), "relu2_2".into(), "relu3_3".into()],
    };
    let mut ar = Archive::new(serde_json::json!({
        "kind": "extractor",
        "architecture": arch,
    }));
    let mut cin = 3;
    for (s, spec) in arch.stages.iter().enumerate() {
        for j in 0..spec.convs {
            let fan_in = (cin * 9) as f64;
            ar.push(
                format!("stages.{s}.{j}.weight"),
                Dtype::F32,
                randn(rng, &[spec.out_channels, cin, 3, 3], (2.0 / fan_in).sqrt()),
            );
            ar.push(
                format!("stages.{s}.{j}.bias"),
                Dtype::F32,
                randn(rng, &[spec.out_channels], 0.05),
            );
            cin = spec.out_channels;
        }
    }
    for name in &arch.perceptual_layers {
        let ch = arch.stages.iter().find(|s| &s.name == name).unwrap().out_channels;
        ar.push(
            format!("lpips.{name}.weight"),
            Dtype::F32,
            uniform(rng, &[ch], 0.2, 1.0),
        );
    }
    ConvFeatureExtractor::from_archive(ar)
}

fn zero_code(gen: &StyleGenerator) -> Tensor {
    use super::Generator;
    Tensor::zeros(&[gen.num_style_blocks(), gen.style_dim()])
}

/// Builds the seeded toy generator, segmenter and extractor and runs the
/// segmentation smoke check on the zero code.
pub fn make_toy_world(cfg: &ToyWorldConfig) -> Result<ToyWorld> {
    if cfg.num_classes < 2 || cfg.num_classes > 255 {
        return Err(Error::Config(format!(
            "toy world needs 2..=255 classes, got {}",
            cfg.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let generator = build_generator(cfg, &mut rng)?;
    let segmenter = build_segmenter(cfg, &mut rng, &generator)?;
    let extractor = build_extractor(&mut rng)?;

    let img = synth_full(&generator, &zero_code(&generator))?;
    let labels = argmax_labels(&segment_logits(&segmenter, &img)?);
    let hist = labels.histogram();
    let total = labels.len() as f64;
    for (k, count) in hist.iter().enumerate() {
        let frac = *count as f64 / total;
        if frac < SMOKE_MIN_CLASS_FRACTION {
            return Err(Error::SmokeCheck {
                seed: cfg.seed,
                detail: format!("class {k} covers {:.2}% of the zero-code segmentation", frac * 100.0),
            });
        }
    }
    Ok(ToyWorld {
        config: cfg.clone(),
        generator: Arc::new(generator),
        segmenter: Arc::new(segmenter),
        extractor: Arc::new(extractor),
    })
}
