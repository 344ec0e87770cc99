//! Mini-batch SGD with momentum and a step learning-rate schedule.

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{cast, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    /// `(step, multiplier)`: from `step` on, the rate is scaled by `multiplier`.
    pub schedule: Vec<(u64, f64)>,
    pub velocity: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(learning_rate: f64, momentum: f64, schedule: Vec<(u64, f64)>, params: &[&Tensor<T>]) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(invalid("schedule steps must be strictly increasing"));
        }
        Ok(Self {
            learning_rate,
            momentum,
            schedule,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        })
    }

    /// Learning rate in effect at a given step.
    pub fn rate_at(&self, step: u64) -> f64 {
        self.schedule
            .iter()
            .filter(|(s, _)| *s <= step)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }

    pub fn current_rate(&self) -> f64 {
        self.rate_at(self.step)
    }

    /// `v <- momentum*v - lr*g; w <- w + v`, then advances the step counter.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(shape("optimizer parameter count changed"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.velocity[i].shape() || params[i].shape() != g.shape() {
                return Err(shape(format!("parameter {i} shape mismatch")));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        let lr = cast::<T>(self.current_rate());
        let mo = cast::<T>(self.momentum);
        for ((w, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((wv, &gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
                *vv = mo * *vv - lr * gv;
                *wv += *vv;
            }
        }
        self.step += 1;
        Ok(())
    }
}
