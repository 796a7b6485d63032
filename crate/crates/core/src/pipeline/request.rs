//! Serializable transfer requests whose image references are resolved by
//! the caller (file paths for the CLI, stored ids for the service).

use serde::{Deserialize, Serialize};

use super::{CompositeRequest, PipelineOptions, RegionSource};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::masks::TargetMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "S: Deserialize<'de>"))]
pub struct RegionRef<S> {
    pub image: S,
    pub classes: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<S>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "S: Deserialize<'de>"))]
pub struct TransferRequest<S> {
    pub regions: Vec<RegionRef<S>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_mask: Option<S>,
    #[serde(default)]
    pub options: PipelineOptions,
}

impl<S> TransferRequest<S> {
    pub fn resolve(
        &self,
        mut load_image: impl FnMut(&S) -> Result<Image>,
        mut load_mask: impl FnMut(&S) -> Result<TargetMask>,
    ) -> Result<CompositeRequest> {
        if self.regions.is_empty() {
            return Err(Error::Request("at least one region is required".into()));
        }
        let mut regions = Vec::with_capacity(self.regions.len());
        for r in &self.regions {
            let mut src = RegionSource::new(load_image(&r.image)?, r.classes.iter().copied());
            if src.classes.len() != r.classes.len() {
                return Err(Error::InvalidLabels {
                    labels: r.classes.iter().map(|&c| c as u32).collect(),
                    reason: "duplicate class in region".into(),
                });
            }
            src.shape = r.shape.as_ref().map(&mut load_image).transpose()?;
            src.appearance = r.appearance.as_ref().map(&mut load_image).transpose()?;
            regions.push(src);
        }
        Ok(CompositeRequest {
            regions,
            target_mask: self.target_mask.as_ref().map(&mut load_mask).transpose()?,
            options: self.options.clone(),
        })
    }
}

/// Hair transfer: the hair classes come from `hair`, everything else from
/// `identity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "S: Deserialize<'de>"))]
pub struct HairRequest<S> {
    pub identity: S,
    pub hair: Option<S>,
    /// Appearance source for the hair region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<S>,
    /// Image whose hair shape defines the target hair region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<S>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_mask: Option<S>,
    #[serde(default)]
    pub options: PipelineOptions,
}

impl<S> HairRequest<S> {
    pub fn resolve(
        &self,
        num_classes: usize,
        mut load_image: impl FnMut(&S) -> Result<Image>,
        mut load_mask: impl FnMut(&S) -> Result<TargetMask>,
    ) -> Result<CompositeRequest> {
        let hair = self
            .hair
            .as_ref()
            .ok_or_else(|| Error::Request("hair transfer needs a hair reference image".into()).in_stage(super::STAGE_VALIDATE))?;
        let mut req = super::hair_request(
            num_classes,
            load_image(&self.identity)?,
            load_image(hair)?,
            self.target_mask.as_ref().map(&mut load_mask).transpose()?,
            self.options.clone(),
        )?;
        req.regions[1].appearance = self.appearance.as_ref().map(&mut load_image).transpose()?;
        req.regions[1].shape = self.shape.as_ref().map(&mut load_image).transpose()?;
        Ok(req)
    }
}

/// Either request form, tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound(deserialize = "S: Deserialize<'de>"))]
pub enum JobRequest<S> {
    Hair(HairRequest<S>),
    Compose(TransferRequest<S>),
}

impl<S> JobRequest<S> {
    pub fn resolve(
        &self,
        num_classes: usize,
        load_image: impl FnMut(&S) -> Result<Image>,
        load_mask: impl FnMut(&S) -> Result<TargetMask>,
    ) -> Result<CompositeRequest> {
        match self {
            JobRequest::Hair(h) => h.resolve(num_classes, load_image, load_mask),
            JobRequest::Compose(t) => t.resolve(load_image, load_mask),
        }
    }

    /// Every image and mask reference, for existence checks.
    pub fn references(&self) -> (Vec<&S>, Vec<&S>) {
        match self {
            JobRequest::Hair(h) => {
                let imgs = [Some(&h.identity), h.hair.as_ref(), h.appearance.as_ref(), h.shape.as_ref()]
                    .into_iter()
                    .flatten()
                    .collect();
                (imgs, h.target_mask.iter().collect())
            }
            JobRequest::Compose(t) => {
                let imgs = t
                    .regions
                    .iter()
                    .flat_map(|r| [Some(&r.image), r.shape.as_ref(), r.appearance.as_ref()])
                    .flatten()
                    .collect();
                (imgs, t.target_mask.iter().collect())
            }
        }
    }
}
