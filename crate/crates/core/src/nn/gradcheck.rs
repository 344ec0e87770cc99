//! Finite-difference verification of a network's analytic gradients.

use super::layer::{log_sum_exp, softmax_in_place, Mode};
use super::network::Network;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    /// Largest magnitude seen on either side of the comparison.
    pub max_abs_gradient: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Scalar objective whose parameter gradient is checked.
#[derive(Clone, Debug)]
pub enum Objective {
    /// Mean hard-label cross-entropy of the main head.
    CrossEntropy(Vec<usize>),
    /// `sum(r * logits)` for a fixed tensor `r`, i.e. an arbitrary upstream gradient.
    Projection(Tensor<f64>),
}

impl Objective {
    fn value(&self, net: &Network<f64>, input: &Tensor<f64>) -> Result<f64> {
        let trace = net.run(input, Mode::Train)?;
        let k = net.spec.num_outputs;
        Ok(match self {
            Objective::CrossEntropy(labels) => {
                let mut total = 0.0;
                for (row, &y) in trace.logits.data().chunks(k).zip(labels) {
                    total += log_sum_exp(row) - row[y];
                }
                total / labels.len() as f64
            }
            Objective::Projection(r) => {
                let mut total = 0.0;
                for (&a, &b) in r.data().iter().zip(trace.logits.data()) {
                    total += a * b;
                }
                total
            }
        })
    }

    fn logit_gradient(&self, logits: &Tensor<f64>, k: usize) -> Tensor<f64> {
        match self {
            Objective::CrossEntropy(labels) => {
                let n = labels.len() as f64;
                let mut g = logits.clone();
                for (row, &y) in g.data_mut().chunks_mut(k).zip(labels) {
                    softmax_in_place(row);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v /= n);
                }
                g
            }
            Objective::Projection(r) => r.clone(),
        }
    }
}

/// Compares backpropagated gradients of the mean cross-entropy against
/// central differences, parameter by parameter.
pub fn gradient_check(
    network: &Network<f64>,
    input_batch: &Tensor<f64>,
    labels: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport> {
    if labels.len() != input_batch.shape()[0] {
        return Err(invalid("one label per batch item required"));
    }
    if labels.iter().any(|&y| y >= network.spec.num_outputs) {
        return Err(invalid("label out of range"));
    }
    check_objective(
        network,
        input_batch,
        &Objective::CrossEntropy(labels.to_vec()),
        tolerance,
    )
}

pub fn check_objective(
    network: &Network<f64>,
    input_batch: &Tensor<f64>,
    objective: &Objective,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let trace = network.run(input_batch, Mode::Train)?;
    let upstream = objective.logit_gradient(&trace.logits, network.spec.num_outputs);
    if upstream.shape() != trace.logits.shape() {
        return Err(invalid("projection must match the logit shape"));
    }
    let grads = network.backward(&trace, &upstream, None, Mode::Train)?;
    let analytic: Vec<Tensor<f64>> = grads.flat().into_iter().cloned().collect();
    let names: Vec<String> = network
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| !n.ends_with("running_mean") && !n.ends_with("running_var"))
        .collect();

    let mut probe = network.clone();
    let mut entries = Vec::with_capacity(analytic.len());
    for (pi, (name, a)) in names.into_iter().zip(&analytic).enumerate() {
        let mut worst = 0.0f64;
        let mut max_abs = 0.0f64;
        for j in 0..a.len() {
            let orig = probe.parameters()[pi].data()[j];
            probe.parameters_mut()[pi].data_mut()[j] = orig + DEFAULT_STEP;
            let plus = objective.value(&probe, input_batch)?;
            probe.parameters_mut()[pi].data_mut()[j] = orig - DEFAULT_STEP;
            let minus = objective.value(&probe, input_batch)?;
            probe.parameters_mut()[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            let av = a.data()[j];
            max_abs = max_abs.max(av.abs()).max(numeric.abs());
            worst = worst.max(relative_error(av, numeric));
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_error: worst,
            max_abs_gradient: max_abs,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}
