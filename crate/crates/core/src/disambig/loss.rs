//! Hard-label cross-entropy plus a weighted soft-label term, computed from logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::nn::layer::{log_sum_exp, softmax_in_place};
use crate::tensor::{cast, Scalar};

/// Floor applied to soft targets inside `log f` for the printed orientation.
pub const SOFT_TARGET_FLOOR: f64 = 1e-12;

/// Which way round the soft cross-entropy is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftLoss {
    /// `-sum f log q`: the fixed target scores the prediction.
    #[default]
    Standard,
    /// `-sum q log f`: prediction times log of the fixed target.
    Printed,
}

impl fmt::Display for SoftLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SoftLoss::Standard => "standard",
            SoftLoss::Printed => "printed",
        })
    }
}

impl FromStr for SoftLoss {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SoftLoss::Standard),
            "printed" => Ok(SoftLoss::Printed),
            _ => Err(invalid(format!("soft loss must be standard or printed, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskLossConfig {
    pub lambda: f64,
    pub soft_loss: SoftLoss,
}

impl Default for MultiTaskLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            soft_loss: SoftLoss::Standard,
        }
    }
}

impl MultiTaskLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Per-sample loss terms and logit gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms<T> {
    /// `-log p_y`.
    pub hard: T,
    /// Soft term already multiplied by lambda.
    pub soft: T,
    pub grad_main: Vec<T>,
    pub grad_aux: Vec<T>,
}

impl<T: Scalar> LossTerms<T> {
    pub fn total(&self) -> T {
        self.hard + self.soft
    }
}

/// `-log softmax(z)_y` and its gradient `softmax(z) - onehot(y)`.
pub fn hard_loss<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(invalid(format!(
            "label {label} out of range for {} outputs",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits);
    let loss = lse - logits[label];
    let mut grad = logits.to_vec();
    softmax_in_place(&mut grad);
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// Unweighted soft cross-entropy and its gradient w.r.t. the auxiliary logits.
pub fn soft_loss<T: Scalar>(aux_logits: &[T], target: &[T], orientation: SoftLoss) -> Result<(T, Vec<T>)> {
    if aux_logits.len() != target.len() || target.is_empty() {
        return Err(shape(format!(
            "{} auxiliary logits for a soft target of length {}",
            aux_logits.len(),
            target.len()
        )));
    }
    let lse = log_sum_exp(aux_logits);
    let mut q = aux_logits.to_vec();
    softmax_in_place(&mut q);
    match orientation {
        SoftLoss::Standard => {
            let loss = target
                .iter()
                .zip(aux_logits)
                .map(|(&f, &z)| f * (lse - z))
                .fold(T::zero(), |a, b| a + b);
            let grad = q.iter().zip(target).map(|(&qk, &fk)| qk - fk).collect();
            Ok((loss, grad))
        }
        SoftLoss::Printed => {
            let floor: T = cast(SOFT_TARGET_FLOOR);
            let neg_log_f: Vec<T> = target.iter().map(|&f| -f.max(floor).ln()).collect();
            let loss = q
                .iter()
                .zip(&neg_log_f)
                .map(|(&qk, &a)| qk * a)
                .fold(T::zero(), |a, b| a + b);
            let grad = q.iter().zip(&neg_log_f).map(|(&qk, &a)| qk * (a - loss)).collect();
            Ok((loss, grad))
        }
    }
}

/// Hard cross-entropy on the main head plus `lambda` times the soft term on
/// the auxiliary head. With lambda 0 the soft term and its gradient are zero.
pub fn multitask_loss<T: Scalar>(
    main_logits: &[T],
    label: usize,
    aux_logits: &[T],
    soft_target: &[T],
    config: &MultiTaskLossConfig,
) -> Result<LossTerms<T>> {
    config.validate()?;
    let (hard, grad_main) = hard_loss(main_logits, label)?;
    if config.lambda == 0.0 {
        return Ok(LossTerms {
            hard,
            soft: T::zero(),
            grad_main,
            grad_aux: vec![T::zero(); aux_logits.len()],
        });
    }
    let lambda: T = cast(config.lambda);
    let (soft, grad) = soft_loss(aux_logits, soft_target, config.soft_loss)?;
    Ok(LossTerms {
        hard,
        soft: lambda * soft,
        grad_main,
        grad_aux: grad.into_iter().map(|g| lambda * g).collect(),
    })
}
