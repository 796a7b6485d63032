use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{fingerprint_entries, Segmenter};
use crate::archive::Archive;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::resample::bicubic_pair;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterArch {
    pub num_classes: usize,
    pub input_resolution: usize,
    /// `(out_channels, kernel)` of each hidden layer; every hidden layer is
    /// followed by `tanh`. A 1×1 classifier to `num_classes` follows.
    pub hidden: Vec<(usize, usize)>,
}

struct Layer {
    weight: Arc<Tensor>,
    bias: Vec<f64>,
}

/// Fully convolutional per-pixel classifier.
pub struct ConvSegmenter {
    arch: SegmenterArch,
    layers: Vec<Layer>,
    fingerprint: String,
    archive: Archive,
}

impl ConvSegmenter {
    pub fn from_archive(archive: Archive) -> Result<Self> {
        let arch: SegmenterArch = serde_json::from_value(
            archive
                .metadata
                .get("architecture")
                .cloned()
                .ok_or_else(|| Error::Config("segmenter archive lacks `architecture`".into()))?,
        )?;
        let mut cin = 3;
        let mut layers = Vec::new();
        let specs = arch
            .hidden
            .iter()
            .copied()
            .chain(std::iter::once((arch.num_classes, 1)));
        for (i, (cout, k)) in specs.enumerate() {
            if k % 2 == 0 {
                return Err(Error::Config(format!("segmenter layer {i}: kernel must be odd")));
            }
            layers.push(Layer {
                weight: Arc::new(
                    archive
                        .get_shaped(&format!("layers.{i}.weight"), &[cout, cin, k, k])?
                        .clone(),
                ),
                bias: archive
                    .get_shaped(&format!("layers.{i}.bias"), &[cout])?
                    .data()
                    .to_vec(),
            });
            cin = cout;
        }
        let fingerprint =
            fingerprint_entries(archive.names().map(|n| (n, archive.get(n).unwrap())));
        Ok(Self {
            arch,
            layers,
            fingerprint,
            archive,
        })
    }

    pub fn architecture(&self) -> &SegmenterArch {
        &self.arch
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }
}

impl Segmenter for ConvSegmenter {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn input_resolution(&self) -> usize {
        self.arch.input_resolution
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn record_logits(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("segmenter input {:?}", shape)));
        }
        let r = self.arch.input_resolution;
        let mut x = if (shape[1], shape[2]) != (r, r) {
            let (ry, rx) = bicubic_pair(shape[1], shape[2], r, r);
            tape.resample(image, ry, rx)
        } else {
            image
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = tape.conv2d(x, layer.weight.clone());
            x = tape.add_channel_const(x, &layer.bias);
            if i < last {
                x = tape.tanh(x);
            }
        }
        Ok(x)
    }
}
