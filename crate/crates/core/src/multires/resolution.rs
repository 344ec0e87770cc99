//! Resolution roster and the per-resolution network stacks.
//!
//! Every stack brings its input down to a 7x7 map before global average
//! pooling. The fine (48 px) stack is the coarse stack with three extra
//! unpadded 3x3 convolutions; those sit after the first pooling stage, which
//! is where they shrink 21x21 to 15x15 so the second pool lands on 7x7.

use serde::{Deserialize, Serialize};

use super::crop::DEFAULT_CROP_SCALES;
use crate::error::{invalid, Result};
use crate::nn::{LayerSpec, NetworkSpec};

/// Spatial extent every stack feeds into global average pooling.
pub const POOLED_EXTENT: usize = 7;

/// The stored image sizes with a built-in network.
pub const SUPPORTED_SIZES: [usize; 4] = [16, 32, 48, 64];

pub const COARSE_SIZE: usize = 32;
pub const FINE_SIZE: usize = 48;

/// Crop side `M = round(0.875 N)`.
pub fn crop_size_for(stored_size: usize) -> usize {
    (0.875 * stored_size as f64).round() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSpec {
    pub stored_size: usize,
    pub crop_size: usize,
    pub crop_scales: Vec<f64>,
    pub network: NetworkSpec,
}

impl ResolutionSpec {
    pub fn new(stored_size: usize, crop_scales: Vec<f64>, network: NetworkSpec) -> Result<Self> {
        let spec = Self {
            stored_size,
            crop_size: crop_size_for(stored_size),
            crop_scales,
            network,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Built-in stack for one of [`SUPPORTED_SIZES`].
    pub fn standard(stored_size: usize, num_classes: usize) -> Result<Self> {
        Self::new(
            stored_size,
            DEFAULT_CROP_SCALES.to_vec(),
            network_for_size(stored_size, num_classes)?,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size != crop_size_for(self.stored_size) {
            return Err(invalid("crop size must be round(0.875 N)"));
        }
        if self.network.input_size != self.crop_size {
            return Err(invalid(format!(
                "network {} takes {} px, crops are {} px",
                self.network.name, self.network.input_size, self.crop_size
            )));
        }
        for &s in &self.crop_scales {
            let side = (s * self.stored_size as f64).round();
            if !(s > 0.0) || side < 1.0 || side > self.stored_size as f64 {
                return Err(invalid(format!(
                    "crop scale {s} is illegal for N = {}",
                    self.stored_size
                )));
            }
        }
        self.network.validate()
    }
}

fn stage(layers: &mut Vec<LayerSpec>, cin: usize, cout: usize, pad: usize) {
    layers.push(LayerSpec::conv(cin, cout, 3, pad));
    layers.push(LayerSpec::batchnorm(cout));
    layers.push(LayerSpec::Relu);
}

fn pool(layers: &mut Vec<LayerSpec>) {
    layers.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
}

fn finish(name: &str, input_size: usize, width: usize, k: usize, mut layers: Vec<LayerSpec>) -> NetworkSpec {
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::dense(width, k));
    layers.push(LayerSpec::Softmax);
    NetworkSpec {
        name: name.to_string(),
        input_size,
        input_channels: 3,
        num_outputs: k,
        layers,
        aux_outputs: None,
    }
}

/// 32 px images, 28 px crops: conv-pool-conv-pool-conv.
pub fn coarse_network(k: usize) -> NetworkSpec {
    let mut l = Vec::new();
    stage(&mut l, 3, 8, 1);
    pool(&mut l);
    stage(&mut l, 8, 16, 1);
    pool(&mut l);
    stage(&mut l, 16, 16, 1);
    finish("coarse", 28, 16, k, l)
}

/// 48 px images, 42 px crops: the coarse stack plus three unpadded convs.
pub fn fine_network(k: usize) -> NetworkSpec {
    let mut l = Vec::new();
    stage(&mut l, 3, 8, 1);
    pool(&mut l);
    for _ in 0..3 {
        stage(&mut l, 8, 8, 0);
    }
    stage(&mut l, 8, 16, 1);
    pool(&mut l);
    stage(&mut l, 16, 16, 1);
    finish("fine", 42, 16, k, l)
}

/// 16 px images, 14 px crops.
pub fn tiny_network(k: usize) -> NetworkSpec {
    let mut l = Vec::new();
    stage(&mut l, 3, 8, 1);
    pool(&mut l);
    stage(&mut l, 8, 16, 1);
    finish("tiny", 14, 16, k, l)
}

/// 64 px images, 56 px crops.
pub fn finest_network(k: usize) -> NetworkSpec {
    let mut l = Vec::new();
    stage(&mut l, 3, 8, 1);
    pool(&mut l);
    for _ in 0..3 {
        stage(&mut l, 8, 8, 0);
    }
    stage(&mut l, 8, 16, 1);
    pool(&mut l);
    for _ in 0..2 {
        stage(&mut l, 16, 16, 0);
    }
    stage(&mut l, 16, 16, 1);
    finish("finest", 56, 16, k, l)
}

pub fn network_by_name(name: &str, k: usize) -> Result<NetworkSpec> {
    match name {
        "tiny" => Ok(tiny_network(k)),
        "coarse" => Ok(coarse_network(k)),
        "fine" => Ok(fine_network(k)),
        "finest" => Ok(finest_network(k)),
        other => Err(invalid(format!("unknown network {other:?}"))),
    }
}

pub fn network_for_size(stored_size: usize, k: usize) -> Result<NetworkSpec> {
    match stored_size {
        16 => Ok(tiny_network(k)),
        32 => Ok(coarse_network(k)),
        48 => Ok(fine_network(k)),
        64 => Ok(finest_network(k)),
        other => Err(invalid(format!(
            "no built-in network for {other} px images (supported: {SUPPORTED_SIZES:?})"
        ))),
    }
}
