//! A trained checkpoint loaded at its stored precision.

use std::path::Path;

use crate::error::{shape, Result};
use crate::io::Fingerprint;
use crate::nn::{Checkpoint, Mode, Network};
use crate::tensor::{Precision, Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum AnyNetwork {
    F32(Network<f32>),
    F64(Network<f64>),
}

#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    pub fingerprint: Fingerprint,
    pub network: AnyNetwork,
}

impl LoadedModel {
    pub fn from_checkpoint(checkpoint: Checkpoint, fingerprint: Fingerprint) -> Result<Self> {
        let network = match checkpoint.header.precision {
            Precision::F32 => AnyNetwork::F32(checkpoint.to_network()?),
            Precision::F64 => AnyNetwork::F64(checkpoint.to_network()?),
        };
        Ok(Self {
            checkpoint,
            fingerprint,
            network,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ck, fp) = Checkpoint::load(path)?;
        Self::from_checkpoint(ck, fp)
    }

    pub fn stored_size(&self) -> usize {
        self.checkpoint.header.stored_size
    }

    pub fn crop_size(&self) -> usize {
        self.checkpoint.header.network.input_size
    }

    pub fn num_outputs(&self) -> usize {
        self.checkpoint.header.network.num_outputs
    }

    /// Eval-mode main-head probabilities for a batch of `[C, M, M]` crops.
    pub fn batch_probabilities(&self, crops: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
        fn run<T: Scalar>(net: &Network<T>, crops: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
            let conv: Vec<Tensor<T>> = crops.iter().map(|c| c.convert()).collect();
            let batch = Tensor::stack(&conv)?;
            let p = net.probabilities(&batch, Mode::Eval)?;
            Ok((0..crops.len())
                .map(|i| p.row(i).iter().map(|v| v.to_f64_lossless()).collect())
                .collect())
        }
        match &self.network {
            AnyNetwork::F32(n) => run(n, crops),
            AnyNetwork::F64(n) => run(n, crops),
        }
    }

    pub(crate) fn check_image(&self, image: &Tensor<f64>) -> Result<()> {
        let n = self.stored_size();
        if image.shape() != [self.checkpoint.header.network.input_channels, n, n] {
            return Err(shape(format!(
                "model expects [{}, {n}, {n}] images, got {:?}",
                self.checkpoint.header.network.input_channels,
                image.shape()
            )));
        }
        Ok(())
    }
}
