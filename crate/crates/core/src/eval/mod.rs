//! Top-k error, score dumps and evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::disambig::{redistribute, Partition};
use crate::error::{format, invalid, shape, Error, Result};
use crate::io::{fingerprint, short_hex, write_atomic, ByteReader, ByteWriter, Fingerprint};
use crate::multires::model::LoadedModel;
use crate::multires::predict::{fuse, predict};

pub const MAGIC: &[u8; 4] = b"MRSC";
pub const VERSION: u32 = 1;

/// Rank of the true class: classes scoring strictly higher, plus classes
/// with an equal score and a lower index.
pub fn label_rank(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

/// Index of the highest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = j;
        }
    }
    best
}

/// Fraction of images whose label is not among the `k` best-ranked classes.
pub fn top_k_error<S: AsRef<[f64]>>(scores: &[S], labels: &[usize], k: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(invalid("no scores to evaluate"));
    }
    if scores.len() != labels.len() {
        return Err(shape(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let width = scores[0].as_ref().len();
    if k == 0 || k > width {
        return Err(invalid(format!("k = {k} with {width} classes")));
    }
    let mut errors = 0usize;
    for (row, &y) in scores.iter().zip(labels) {
        let row = row.as_ref();
        if row.len() != width {
            return Err(shape("score rows differ in length"));
        }
        if y >= width {
            return Err(invalid(format!("label {y} out of range for {width} classes")));
        }
        if label_rank(row, y) >= k {
            errors += 1;
        }
    }
    Ok(errors as f64 / labels.len() as f64)
}

/// Top-1 accuracy per class; `None` for classes without images.
pub fn per_class_accuracy<S: AsRef<[f64]>>(scores: &[S], labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (row, &y) in scores.iter().zip(labels) {
        total[y] += 1;
        if argmax(row.as_ref()) == y {
            hit[y] += 1;
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

/// Per-image class probabilities from one model (or a fusion of several)
/// on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDump {
    pub model: Fingerprint,
    pub dataset: Fingerprint,
    /// Stored image size the model saw; 0 for fused dumps.
    pub resolution: u32,
    pub ids: Vec<u32>,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreDump {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        (0..self.len()).map(|i| self.row(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.values.len() != self.ids.len() * self.width {
            return Err(shape("score dump extents disagree"));
        }
        for i in 0..self.len() {
            let row = self.row(i);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("score row {i} is not a probability vector")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&self.model);
        w.bytes(&self.dataset);
        w.u32(self.resolution);
        w.u32(self.ids.len() as u32);
        w.u32(self.width as u32);
        for &id in &self.ids {
            w.u32(id);
        }
        for &v in &self.values {
            w.f64(v);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "score dump");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let model = r.fingerprint()?;
        let dataset = r.fingerprint()?;
        let resolution = r.u32()?;
        let count = r.u32()? as usize;
        let width = r.u32()? as usize;
        let expected = count
            .checked_mul(4 + 8 * width)
            .ok_or_else(|| format("score dump extents overflow"))?;
        if bytes.len() != 4 + 4 + 64 + 12 + expected {
            return Err(format(format!("score dump size does not match {count}x{width} values")));
        }
        let ids = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let values = (0..count * width).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let dump = Self {
            model,
            dataset,
            resolution,
            ids,
            width,
            values,
        };
        dump.validate().map_err(|e| format(e.to_string()))?;
        Ok(dump)
    }

    pub fn save(&self, path: &Path) -> Result<Fingerprint> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(fingerprint(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::io::read_file(path)?)
    }
}

/// Ten-crop scores of `model` on every image of `dataset`, downsampled to
/// the model's stored size when the dataset is larger.
pub fn score_dataset(model: &LoadedModel, dataset: &Dataset) -> Result<ScoreDump> {
    let n = model.stored_size();
    let local;
    let data = if dataset.size() == n {
        dataset
    } else {
        local = dataset.resample(n)?;
        &local
    };
    let rows: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| predict(model, &data.image(i)))
        .collect::<Result<_>>()?;
    Ok(ScoreDump {
        model: model.fingerprint,
        dataset: dataset.fingerprint(),
        resolution: n as u32,
        ids: (0..data.len() as u32).collect(),
        width: model.num_outputs(),
        values: rows.into_iter().flatten().collect(),
    })
}

/// Weighted mean of dumps over the same images. A single dump with weight 1
/// comes back unchanged.
pub fn fuse_dumps(dumps: &[&ScoreDump], weights: Option<&[f64]>) -> Result<ScoreDump> {
    let first = *dumps.first().ok_or_else(|| invalid("nothing to fuse"))?;
    for d in &dumps[1..] {
        if d.dataset != first.dataset || d.ids != first.ids {
            return Err(Error::Mismatch("fused dumps cover different images".into()));
        }
        if d.width != first.width {
            return Err(shape("fused dumps have different class counts"));
        }
    }
    let mut values = Vec::with_capacity(first.values.len());
    for i in 0..first.len() {
        let rows: Vec<&[f64]> = dumps.iter().map(|d| d.row(i)).collect();
        values.extend(fuse(&rows, weights)?);
    }
    if dumps.len() == 1 {
        return Ok(ScoreDump {
            values,
            ..first.clone()
        });
    }
    let mut id = ByteWriter::new();
    for d in dumps {
        id.bytes(&d.model);
    }
    if let Some(w) = weights {
        w.iter().for_each(|&x| id.f64(x));
    }
    Ok(ScoreDump {
        model: fingerprint(&id.buf),
        dataset: first.dataset,
        resolution: 0,
        ids: first.ids.clone(),
        width: first.width,
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub top1_error: f64,
    /// Top-k error with `k = min(5, classes)`.
    pub top5_error: f64,
    pub top5_k: usize,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub model_fingerprint: String,
    pub dataset_fingerprint: String,
    pub partition_fingerprint: Option<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s.into_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model     {}", self.model_fingerprint);
        let _ = writeln!(s, "dataset   {}", self.dataset_fingerprint);
        if let Some(p) = &self.partition_fingerprint {
            let _ = writeln!(s, "partition {p}");
        }
        let _ = writeln!(s, "images    {}", self.n_images);
        let _ = writeln!(s, "top-1 error {:.2}%", 100.0 * self.top1_error);
        let _ = writeln!(s, "top-{} error {:.2}%", self.top5_k, 100.0 * self.top5_error);
        for (c, acc) in self.per_class_accuracy.iter().enumerate() {
            match acc {
                Some(a) => {
                    let _ = writeln!(s, "  class {c:>3}  {:6.2}%", 100.0 * a);
                }
                None => {
                    let _ = writeln!(s, "  class {c:>3}      --");
                }
            }
        }
        s
    }
}

/// Scores a dump against `dataset`. With a partition, super-category
/// scores are spread back over the original classes first.
pub fn evaluate(dump: &ScoreDump, dataset: &Dataset, partition: Option<&Partition>) -> Result<EvalReport> {
    let fp = dataset.fingerprint();
    if dump.dataset != fp {
        return Err(Error::Mismatch(format!(
            "dump was scored on dataset {}, not {}",
            short_hex(&dump.dataset),
            short_hex(&fp)
        )));
    }
    if dump.len() != dataset.len() {
        return Err(shape("dump and dataset differ in image count"));
    }
    let rows: Vec<Vec<f64>> = match partition {
        Some(p) => dump
            .rows()
            .into_iter()
            .map(|r| redistribute(r, p))
            .collect::<Result<_>>()?,
        None => dump.rows().into_iter().map(<[f64]>::to_vec).collect(),
    };
    let k1 = rows[0].len();
    if k1 != dataset.num_classes() {
        return Err(shape(format!(
            "scores cover {k1} classes, dataset has {}",
            dataset.num_classes()
        )));
    }
    let labels: Vec<usize> = dump.ids.iter().map(|&i| dataset.label(i as usize)).collect();
    let top5_k = k1.min(5);
    Ok(EvalReport {
        n_images: labels.len(),
        top1_error: top_k_error(&rows, &labels, 1)?,
        top5_error: top_k_error(&rows, &labels, top5_k)?,
        top5_k,
        per_class_accuracy: per_class_accuracy(&rows, &labels, k1),
        model_fingerprint: hex::encode(dump.model),
        dataset_fingerprint: hex::encode(fp),
        partition_fingerprint: match partition {
            Some(p) => Some(hex::encode(fingerprint(&p.to_json()?))),
            None => None,
        },
    })
}
