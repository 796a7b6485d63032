use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{fingerprint_entries, FeatureExtractor, Features};
use crate::archive::Archive;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon of the channel normalization, as in the reference LPIPS code.
pub const NORMALIZE_EPS: f64 = 1e-10;
const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Name under which the stage output is exposed.
    pub name: String,
    pub out_channels: usize,
    /// Number of 3×3 conv + leaky-ReLU layers.
    pub convs: usize,
    /// 2×2 average pooling before the stage.
    pub pool_before: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorArch {
    pub stages: Vec<StageSpec>,
    pub style_layers: Vec<String>,
    pub perceptual_layers: Vec<String>,
}

struct Conv {
    weight: Arc<Tensor>,
    bias: Vec<f64>,
}

/// VGG-style convolutional feature pyramid.
pub struct ConvFeatureExtractor {
    arch: ExtractorArch,
    stages: Vec<Vec<Conv>>,
    style_idx: Vec<usize>,
    perceptual_idx: Vec<usize>,
    lpips_weights: Vec<Vec<f64>>,
    fingerprint: String,
    archive: Archive,
}

impl ConvFeatureExtractor {
    pub fn from_archive(archive: Archive) -> Result<Self> {
        let arch: ExtractorArch = serde_json::from_value(
            archive
                .metadata
                .get("architecture")
                .cloned()
                .ok_or_else(|| Error::Config("extractor archive lacks `architecture`".into()))?,
        )?;
        let mut cin = 3;
        let mut stages = Vec::new();
        for (s, spec) in arch.stages.iter().enumerate() {
            let mut convs = Vec::new();
            for j in 0..spec.convs {
                let cout = spec.out_channels;
                convs.push(Conv {
                    weight: Arc::new(
                        archive
                            .get_shaped(&format!("stages.{s}.{j}.weight"), &[cout, cin, 3, 3])?
                            .clone(),
                    ),
                    bias: archive
                        .get_shaped(&format!("stages.{s}.{j}.bias"), &[cout])?
                        .data()
                        .to_vec(),
                });
                cin = cout;
            }
            stages.push(convs);
        }
        let find = |name: &String| {
            arch.stages
                .iter()
                .position(|s| &s.name == name)
                .ok_or_else(|| Error::Config(format!("unknown extractor layer `{name}`")))
        };
        let style_idx = arch.style_layers.iter().map(find).collect::<Result<Vec<_>>>()?;
        let perceptual_idx = arch
            .perceptual_layers
            .iter()
            .map(find)
            .collect::<Result<Vec<_>>>()?;
        let lpips_weights = arch
            .perceptual_layers
            .iter()
            .zip(&perceptual_idx)
            .map(|(name, &i)| {
                archive
                    .get_shaped(&format!("lpips.{name}.weight"), &[arch.stages[i].out_channels])
                    .map(|t| t.data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let fingerprint =
            fingerprint_entries(archive.names().map(|n| (n, archive.get(n).unwrap())));
        Ok(Self {
            arch,
            stages,
            style_idx,
            perceptual_idx,
            lpips_weights,
            fingerprint,
            archive,
        })
    }

    pub fn architecture(&self) -> &ExtractorArch {
        &self.arch
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn style_layer_names(&self) -> &[String] {
        &self.arch.style_layers
    }

    fn perceptual_layer_names(&self) -> &[String] {
        &self.arch.perceptual_layers
    }

    fn perceptual_weights(&self, layer: usize) -> &[f64] {
        &self.lpips_weights[layer]
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn record_features(&self, tape: &mut Tape, image: Var) -> Result<Features> {
        let last_needed = self
            .style_idx
            .iter()
            .chain(&self.perceptual_idx)
            .copied()
            .max()
            .unwrap_or(0);
        let mut outputs = Vec::with_capacity(last_needed + 1);
        let mut x = image;
        for (spec, convs) in self.arch.stages.iter().zip(&self.stages).take(last_needed + 1) {
            if spec.pool_before {
                x = tape.avg_pool2x(x);
            }
            for conv in convs {
                x = tape.conv2d(x, conv.weight.clone());
                x = tape.add_channel_const(x, &conv.bias);
                x = tape.leaky_relu(x, LRELU_SLOPE);
            }
            outputs.push(x);
        }
        let style = self.style_idx.iter().map(|&i| outputs[i]).collect();
        let perceptual = self
            .perceptual_idx
            .iter()
            .map(|&i| tape.channel_normalize(outputs[i], NORMALIZE_EPS))
            .collect();
        Ok(Features { style, perceptual })
    }
}
