use std::f64::consts::SQRT_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_split, fingerprint_entries, Generator};
use crate::archive::Archive;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{GridShape, Tensor};

const DEMOD_EPS: f64 = 1e-8;
const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    /// Nearest-neighbour 2x upsampling before the convolution.
    pub upsample: bool,
}

/// Layout of a [`StyleGenerator`]; stored in the weight archive metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub style_dim: usize,
    pub const_channels: usize,
    pub const_size: usize,
    pub mapping_layers: usize,
    pub blocks: Vec<BlockSpec>,
}

impl GeneratorArch {
    pub fn block_shapes(&self) -> Vec<GridShape> {
        let mut shapes = Vec::with_capacity(self.blocks.len() + 1);
        let mut cur = GridShape::new(self.const_channels, self.const_size, self.const_size);
        shapes.push(cur);
        for b in &self.blocks {
            let scale = if b.upsample { 2 } else { 1 };
            cur = GridShape::new(b.out_channels, cur.height * scale, cur.width * scale);
            shapes.push(cur);
        }
        shapes
    }

    pub fn resolution(&self) -> usize {
        self.block_shapes().last().map(|s| s.height).unwrap_or(0)
    }

    /// Block table of the 1024×1024, 18-style-input face generator that the
    /// full-scale setting targets: 512 channels up to 64×64, halving after.
    pub fn reference_1024() -> Self {
        let mut blocks = vec![BlockSpec {
            out_channels: 512,
            upsample: false,
        }];
        let channels = [512, 512, 512, 512, 256, 128, 64, 32];
        for c in channels {
            blocks.push(BlockSpec {
                out_channels: c,
                upsample: true,
            });
            blocks.push(BlockSpec {
                out_channels: c,
                upsample: false,
            });
        }
        blocks.push(BlockSpec {
            out_channels: 32,
            upsample: false,
        });
        Self {
            style_dim: 512,
            const_channels: 512,
            const_size: 4,
            mapping_layers: 8,
            blocks,
        }
    }
}

struct Block {
    affine_w: Arc<Tensor>,
    affine_b: Tensor,
    conv: Arc<Tensor>,
    /// Σ over kernel taps of squared weights, `(C_out, C_in)`, for demodulation.
    conv_sq: Arc<Tensor>,
    /// Bias plus scaled fixed noise, `(C_out, H, W)`.
    bias_noise: Tensor,
    upsample: bool,
}

/// Modulated-convolution generator with a learned constant input, one style
/// row per block, and a final modulated 1×1 RGB projection driven by the
/// last style row.
pub struct StyleGenerator {
    arch: GeneratorArch,
    shapes: Vec<GridShape>,
    constant: Tensor,
    mapping: Vec<(Tensor, Tensor)>,
    blocks: Vec<Block>,
    rgb_affine_w: Arc<Tensor>,
    rgb_affine_b: Tensor,
    rgb_w: Arc<Tensor>,
    rgb_b: Vec<f64>,
    latent_mean: Tensor,
    fingerprint: String,
    archive: Archive,
}

impl StyleGenerator {
    pub fn from_archive(archive: Archive) -> Result<Self> {
        let arch: GeneratorArch = serde_json::from_value(
            archive
                .metadata
                .get("architecture")
                .cloned()
                .ok_or_else(|| Error::Config("generator archive lacks `architecture`".into()))?,
        )?;
        if arch.blocks.len() < 2 {
            return Err(Error::Config("generator needs at least two style blocks".into()));
        }
        let d = arch.style_dim;
        let shapes = arch.block_shapes();
        let constant = archive
            .get_shaped("const", &shapes[0].dims())?
            .clone();
        let mut mapping = Vec::new();
        for i in 0..arch.mapping_layers {
            mapping.push((
                archive.get_shaped(&format!("mapping.{i}.weight"), &[d, d])?.clone(),
                archive.get_shaped(&format!("mapping.{i}.bias"), &[d])?.clone(),
            ));
        }
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for (b, spec) in arch.blocks.iter().enumerate() {
            let cin = shapes[b].channels;
            let out = shapes[b + 1];
            let cout = spec.out_channels;
            let conv = archive
                .get_shaped(&format!("blocks.{b}.conv.weight"), &[cout, cin, 3, 3])?
                .clone();
            let mut conv_sq = vec![0.0; cout * cin];
            for (i, taps) in conv.data().chunks(9).enumerate() {
                conv_sq[i] = taps.iter().map(|v| v * v).sum();
            }
            let bias = archive.get_shaped(&format!("blocks.{b}.bias"), &[cout])?;
            let noise = archive.get_shaped(&format!("blocks.{b}.noise"), &[out.height, out.width])?;
            let strength = archive
                .get_shaped(&format!("blocks.{b}.noise_strength"), &[1])?
                .item();
            let hw = out.height * out.width;
            let mut bias_noise = vec![0.0; cout * hw];
            for (c, plane) in bias_noise.chunks_mut(hw).enumerate() {
                for (v, n) in plane.iter_mut().zip(noise.data()) {
                    *v = bias.data()[c] + strength * n;
                }
            }
            blocks.push(Block {
                affine_w: Arc::new(
                    archive
                        .get_shaped(&format!("blocks.{b}.affine.weight"), &[cin, d])?
                        .clone(),
                ),
                affine_b: archive
                    .get_shaped(&format!("blocks.{b}.affine.bias"), &[cin])?
                    .clone(),
                conv: Arc::new(conv),
                conv_sq: Arc::new(Tensor::from_parts(vec![cout, cin], conv_sq)),
                bias_noise: Tensor::from_parts(vec![cout, out.height, out.width], bias_noise),
                upsample: spec.upsample,
            });
        }
        let last = shapes.last().unwrap().channels;
        let rgb_affine_w = Arc::new(archive.get_shaped("to_rgb.affine.weight", &[last, d])?.clone());
        let rgb_affine_b = archive.get_shaped("to_rgb.affine.bias", &[last])?.clone();
        let rgb_w = Arc::new(archive.get_shaped("to_rgb.weight", &[3, last, 1, 1])?.clone());
        let rgb_b = archive.get_shaped("to_rgb.bias", &[3])?.data().to_vec();
        let latent_mean = archive.get_shaped("latent_mean", &[d])?.clone();
        let fingerprint =
            fingerprint_entries(archive.names().map(|n| (n, archive.get(n).unwrap())));
        Ok(Self {
            arch,
            shapes,
            constant,
            mapping,
            blocks,
            rgb_affine_w,
            rgb_affine_b,
            rgb_w,
            rgb_b,
            latent_mean,
            fingerprint,
            archive,
        })
    }

    pub fn architecture(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    /// Maps a normal latent `z` to the style space.
    pub fn map_latent(&self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        let n = self.mapping.len();
        for (i, (w, b)) in self.mapping.iter().enumerate() {
            let d = b.len();
            let mut y = b.data().to_vec();
            for (r, yr) in y.iter_mut().enumerate() {
                *yr += w.data()[r * d..(r + 1) * d]
                    .iter()
                    .zip(&x)
                    .map(|(p, q)| p * q)
                    .sum::<f64>();
            }
            if i + 1 < n {
                y.iter_mut()
                    .for_each(|v| *v = if *v > 0.0 { *v } else { LRELU_SLOPE * *v } * SQRT_2);
            }
            x = y;
        }
        x
    }

    fn record_block(&self, tape: &mut Tape, b: usize, x: Var, row: Var) -> Var {
        let blk = &self.blocks[b];
        let x = if blk.upsample { tape.upsample2x(x) } else { x };
        let s = tape.matvec(row, blk.affine_w.clone());
        let s = tape.add_const(s, &blk.affine_b);
        let xm = tape.scale_channels(x, s);
        let y = tape.conv2d(xm, blk.conv.clone());
        let s2 = tape.square(s);
        let d = tape.matvec(s2, blk.conv_sq.clone());
        let d = tape.add_scalar(d, DEMOD_EPS);
        let d = tape.powf(d, -0.5);
        let y = tape.scale_channels(y, d);
        let y = tape.add_const(y, &blk.bias_noise);
        let y = tape.leaky_relu(y, LRELU_SLOPE);
        tape.scale(y, SQRT_2)
    }

    fn record_rgb(&self, tape: &mut Tape, x: Var, row: Var) -> Var {
        let s = tape.matvec(row, self.rgb_affine_w.clone());
        let s = tape.add_const(s, &self.rgb_affine_b);
        let xm = tape.scale_channels(x, s);
        let y = tape.conv2d(xm, self.rgb_w.clone());
        let y = tape.add_channel_const(y, &self.rgb_b);
        tape.tanh(y)
    }
}

impl Generator for StyleGenerator {
    fn num_style_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn style_dim(&self) -> usize {
        self.arch.style_dim
    }

    fn resolution(&self) -> usize {
        self.shapes.last().unwrap().height
    }

    fn block_shapes(&self) -> &[GridShape] {
        &self.shapes
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn mean_latent(&self) -> &Tensor {
        &self.latent_mean
    }

    fn record_prefix(&self, tape: &mut Tape, rows: &[Var]) -> Result<Var> {
        let m = rows.len();
        check_split(self, m)?;
        let mut x = tape.constant(self.constant.clone());
        for (b, row) in rows.iter().enumerate() {
            x = self.record_block(tape, b, x, *row);
        }
        Ok(x)
    }

    fn record_suffix(&self, tape: &mut Tape, structure: Var, rows: &[Var]) -> Result<Var> {
        let n = self.blocks.len();
        if rows.is_empty() || rows.len() >= n {
            return Err(Error::Dimension {
                block: "appearance code".into(),
                expected: format!("1..{} rows", n),
                got: format!("{} rows", rows.len()),
            });
        }
        let m = n - rows.len();
        let want = self.shapes[m];
        if tape.shape(structure) != want.dims() {
            return Err(Error::Dimension {
                block: format!("structure tensor at block {m}"),
                expected: want.to_string(),
                got: format!("{:?}", tape.shape(structure)),
            });
        }
        let mut x = structure;
        for (i, row) in rows.iter().enumerate() {
            x = self.record_block(tape, m + i, x, *row);
        }
        Ok(self.record_rgb(tape, x, *rows.last().unwrap()))
    }
}
