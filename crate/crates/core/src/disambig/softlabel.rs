//! Soft targets produced by a knowledge network, cached on disk together
//! with the fingerprint of the checkpoint that produced them.

use std::path::Path;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{format, shape, Error, Result};
use crate::io::{short_hex, write_atomic, ByteReader, ByteWriter, Fingerprint};
use crate::multires::crop::{center_crop, resize_bilinear};
use crate::multires::model::LoadedModel;
use crate::multires::predict::predict;

pub const MAGIC: &[u8; 4] = b"MRSL";
pub const VERSION: u32 = 1;
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelSet {
    pub knowledge_model: Fingerprint,
    pub width: usize,
    /// Row-major, one row of `width` probabilities per image.
    pub values: Vec<f64>,
}

impl SoftLabelSet {
    pub fn len(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !self.values.len().is_multiple_of(self.width) {
            return Err(shape("soft labels do not divide into rows"));
        }
        for i in 0..self.len() {
            let row = self.get(i);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(format(format!("soft label {i} is not a probability vector")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&self.knowledge_model);
        w.u32(self.len() as u32);
        w.u32(self.width as u32);
        for &v in &self.values {
            w.f64(v);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "soft labels");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let knowledge_model = r.fingerprint()?;
        let count = r.u32()? as usize;
        let width = r.u32()? as usize;
        let n = count
            .checked_mul(width)
            .ok_or_else(|| format("soft label extents overflow"))?;
        let mut values = Vec::with_capacity(n.min(bytes.len() / 8));
        for _ in 0..n {
            values.push(r.f64()?);
        }
        r.finish()?;
        let set = Self {
            knowledge_model,
            width,
            values,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::io::read_file(path)?)
    }
}

/// Eval-mode softmax of the knowledge network on each image's center crop
/// (or the ten-crop mean). Images are first resized to the network's stored
/// resolution.
pub fn generate_soft_labels(model: &LoadedModel, dataset: &Dataset, ten_crop: bool) -> Result<SoftLabelSet> {
    let n = model.stored_size();
    let fetch = |i: usize| -> Result<_> {
        let img = dataset.image(i);
        if dataset.size() == n {
            Ok(img)
        } else {
            resize_bilinear(&img, n, n)
        }
    };
    let starts: Vec<usize> = (0..dataset.len()).step_by(CHUNK).collect();
    let chunks: Vec<Vec<Vec<f64>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(dataset.len());
            if ten_crop {
                (start..end).map(|i| predict(model, &fetch(i)?)).collect()
            } else {
                let crops = (start..end)
                    .map(|i| center_crop(&fetch(i)?, model.crop_size()))
                    .collect::<Result<Vec<_>>>()?;
                model.batch_probabilities(&crops)
            }
        })
        .collect::<Result<_>>()?;
    Ok(SoftLabelSet {
        knowledge_model: model.fingerprint,
        width: model.num_outputs(),
        values: chunks.into_iter().flatten().flatten().collect(),
    })
}

/// Reuses `cache` when it was produced by this exact checkpoint for a
/// dataset of the same size; otherwise generates and writes it.
pub fn load_or_generate_soft_labels(
    cache: &Path,
    model: &LoadedModel,
    dataset: &Dataset,
    ten_crop: bool,
) -> Result<SoftLabelSet> {
    if cache.exists() {
        let set = SoftLabelSet::load(cache)?;
        if set.knowledge_model != model.fingerprint {
            return Err(Error::Mismatch(format!(
                "soft labels in {} came from checkpoint {}, not {}",
                cache.display(),
                short_hex(&set.knowledge_model),
                short_hex(&model.fingerprint)
            )));
        }
        if set.len() != dataset.len() || set.width != model.num_outputs() {
            return Err(Error::Mismatch(format!(
                "soft labels in {} hold {}x{} values, expected {}x{}",
                cache.display(),
                set.len(),
                set.width,
                dataset.len(),
                model.num_outputs()
            )));
        }
        return Ok(set);
    }
    let set = generate_soft_labels(model, dataset, ten_crop)?;
    set.save(cache)?;
    Ok(set)
}
