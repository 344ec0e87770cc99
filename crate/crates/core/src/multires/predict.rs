//! Ten-crop inference and arithmetic-mean score fusion.

use super::crop::ten_crop;
use super::model::LoadedModel;
use crate::error::{invalid, shape, Result};
use crate::tensor::Tensor;

/// Averages a list of probability vectors in index order.
pub fn mean_scores(rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows[0].len();
    let mut out = vec![0.0; k];
    for r in rows {
        for (o, &v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Mean of the softmax outputs over the ten test crops of an `N x N` image.
pub fn predict(model: &LoadedModel, image: &Tensor<f64>) -> Result<Vec<f64>> {
    model.check_image(image)?;
    let crops = ten_crop(image, model.crop_size())?;
    let rows = model.batch_probabilities(&crops)?;
    Ok(mean_scores(&rows))
}

/// Weighted mean of score vectors; `None` means equal weights.
pub fn fuse(scores: &[&[f64]], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let first = scores.first().ok_or_else(|| invalid("nothing to fuse"))?;
    let k = first.len();
    if scores.iter().any(|s| s.len() != k) {
        return Err(shape("score vectors differ in length"));
    }
    let equal;
    let weights = match weights {
        Some(w) => {
            validate_weights(w, scores.len())?;
            w
        }
        None => {
            equal = vec![1.0 / scores.len() as f64; scores.len()];
            &equal
        }
    };
    let mut out = vec![0.0; k];
    for (s, &w) in scores.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(s.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

pub fn validate_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(shape(format!("{} weights for {n} score sets", w.len())));
    }
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(invalid("fusion weights must be non-negative"));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("fusion weights sum to {sum}, not 1")));
    }
    Ok(())
}
