//! Coarse/fine resolution networks, crop augmentation, ten-crop inference
//! and score fusion.

pub mod crop;
pub mod model;
pub mod predict;
pub mod resolution;

pub use crop::{ten_crop, train_crop, Anchor, CropParams, DEFAULT_CROP_SCALES};
pub use model::{AnyNetwork, LoadedModel};
pub use predict::{fuse, predict};
pub use resolution::{coarse_network, fine_network, ResolutionSpec};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Member roster of a multi-resolution model and its fusion weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiResSpec {
    pub resolutions: Vec<ResolutionSpec>,
    pub fusion_weights: Vec<f64>,
}

impl MultiResSpec {
    pub fn equal(resolutions: Vec<ResolutionSpec>) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(invalid("a multi-resolution model needs at least one member"));
        }
        let n = resolutions.len();
        let spec = Self {
            resolutions,
            fusion_weights: vec![1.0 / n as f64; n],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        predict::validate_weights(&self.fusion_weights, self.resolutions.len())?;
        let k = self.resolutions[0].network.num_outputs;
        let extent = self.resolutions[0].network.pre_pool_extent()?;
        for r in &self.resolutions {
            r.validate()?;
            if r.network.num_outputs != k {
                return Err(invalid("members disagree on the number of classes"));
            }
            if r.network.pre_pool_extent()? != extent {
                return Err(invalid("members pool different spatial extents"));
            }
        }
        Ok(())
    }
}
