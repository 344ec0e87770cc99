//! Mini-batch training of one resolution's network, optionally against
//! soft labels on an auxiliary head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::disambig::{hard_loss, multitask_loss, MultiTaskLossConfig, SoftLabelSet};
use crate::error::{format, invalid, shape, Result};
use crate::multires::crop::train_crop;
use crate::multires::ResolutionSpec;
use crate::nn::{Checkpoint, Mode, Network, SgdMomentum};
use crate::seed::mix;
use crate::tensor::{cast, Precision, Scalar, Tensor};

const CROP_STREAM: u64 = 0xC209;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fractions of the total step count at which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub loss: MultiTaskLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            seed: 0,
            precision: Precision::F32,
            loss: MultiTaskLossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be positive"));
        }
        if self.lr_milestones.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(invalid("learning-rate milestones are fractions in [0, 1]"));
        }
        if !(self.lr_decay > 0.0) {
            return Err(invalid("lr_decay must be positive"));
        }
        self.loss.validate()
    }

    fn schedule(&self, total_steps: u64) -> Vec<(u64, f64)> {
        let mut out: Vec<(u64, f64)> = Vec::new();
        for &m in &self.lr_milestones {
            let step = (m * total_steps as f64).round() as u64;
            match out.last_mut() {
                Some(last) if last.0 == step => last.1 *= self.lr_decay,
                _ => out.push((step, self.lr_decay)),
            }
        }
        out.sort_by_key(|s| s.0);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    /// Batch mean of the hard-label cross-entropy.
    pub hard: f64,
    /// Batch mean of the weighted soft term; exactly 0 without soft labels.
    pub soft: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut s = String::from("step,epoch,hard,soft,lr\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{},{}\n", r.step, r.epoch, r.hard, r.soft, r.lr));
        }
        s.into_bytes()
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(bytes);
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let f = |i: usize| row.get(i).ok_or_else(|| format("short training log row"));
            let num = |i: usize| -> Result<f64> { f(i)?.parse().map_err(|_| format("bad number in training log")) };
            records.push(LogRecord {
                step: f(0)?.parse().map_err(|_| format("bad step"))?,
                epoch: f(1)?.parse().map_err(|_| format("bad epoch"))?,
                hard: num(2)?,
                soft: num(3)?,
                lr: num(4)?,
            });
        }
        Ok(Self { records })
    }

    /// Mean `(hard, soft)` per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() < r.epoch {
                out.resize(r.epoch, (0.0, 0.0, 0));
            }
            let e = &mut out[r.epoch - 1];
            e.0 += r.hard;
            e.1 += r.soft;
            e.2 += 1;
        }
        out.into_iter()
            .map(|(h, s, n)| (h / n.max(1) as f64, s / n.max(1) as f64))
            .collect()
    }
}

pub struct Trained<T> {
    pub network: Network<T>,
    pub log: TrainingLog,
    pub steps: u64,
}

/// Trains `res.network` (output width taken from the dataset) on random
/// scale-jittered crops. Soft labels, when given with a positive lambda, add
/// an auxiliary head trained toward them.
pub fn train<T: Scalar>(
    res: &ResolutionSpec,
    dataset: &Dataset,
    soft: Option<&SoftLabelSet>,
    cfg: &TrainConfig,
) -> Result<Trained<T>> {
    cfg.validate()?;
    res.validate()?;
    let data;
    let dataset = if dataset.size() == res.stored_size {
        dataset
    } else {
        data = dataset.resample(res.stored_size)?;
        &data
    };
    let soft = soft.filter(|_| cfg.loss.lambda > 0.0);
    if let Some(s) = soft {
        if s.len() != dataset.len() {
            return Err(shape(format!("{} soft labels for {} images", s.len(), dataset.len())));
        }
    }
    let spec = res
        .network
        .clone()
        .with_outputs(dataset.num_classes())
        .with_aux(soft.map(|s| s.width));
    let mut net = Network::<T>::init(spec, cfg.seed)?;

    let batch = cfg.batch_size.min(dataset.len());
    let per_epoch = dataset.len() / batch;
    let total = (per_epoch * cfg.epochs) as u64;
    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum, cfg.schedule(total), &net.parameters())?;
    let images: Vec<Tensor<f64>> = (0..dataset.len()).map(|i| dataset.image(i)).collect();
    let inv_batch: T = cast(1.0 / batch as f64);
    let mut log = TrainingLog::default();

    for epoch in 1..=cfg.epochs {
        let order = dataset.epoch_order(cfg.seed, epoch as u64);
        for chunk in order.chunks_exact(batch) {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, CROP_STREAM, opt.step]));
            let crops = chunk
                .iter()
                .map(|&i| Ok(train_crop(&images[i], &res.crop_scales, res.crop_size, &mut rng)?.convert::<T>()))
                .collect::<Result<Vec<_>>>()?;
            let input = Tensor::stack(&crops)?;
            let trace = net.run(&input, Mode::Train)?;
            let k1 = trace.logits.shape()[1];
            let mut grad = Vec::with_capacity(batch * k1);
            let mut grad_aux = Vec::new();
            let (mut hard_sum, mut soft_sum) = (0.0, 0.0);
            for (b, &i) in chunk.iter().enumerate() {
                let label = dataset.label(i);
                match (soft, &trace.aux_logits) {
                    (Some(s), Some(aux)) => {
                        let target: Vec<T> = s.get(i).iter().map(|&v| cast(v)).collect();
                        let t = multitask_loss(trace.logits.row(b), label, aux.row(b), &target, &cfg.loss)?;
                        hard_sum += t.hard.to_f64_lossless();
                        soft_sum += t.soft.to_f64_lossless();
                        grad.extend(t.grad_main.into_iter().map(|g| g * inv_batch));
                        grad_aux.extend(t.grad_aux.into_iter().map(|g| g * inv_batch));
                    }
                    _ => {
                        let (h, g) = hard_loss(trace.logits.row(b), label)?;
                        hard_sum += h.to_f64_lossless();
                        grad.extend(g.into_iter().map(|g| g * inv_batch));
                    }
                }
            }
            let grad = Tensor::from_vec(trace.logits.shape(), grad)?;
            let grad_aux = match &trace.aux_logits {
                Some(a) if !grad_aux.is_empty() => Some(Tensor::from_vec(a.shape(), grad_aux)?),
                _ => None,
            };
            let grads = net.backward(&trace, &grad, grad_aux.as_ref(), Mode::Train)?;
            net.update_running_stats(&trace);
            log.records.push(LogRecord {
                step: opt.step,
                epoch,
                hard: hard_sum / batch as f64,
                soft: soft_sum / batch as f64,
                lr: opt.current_rate(),
            });
            let flat = grads.flat();
            opt.step(&mut net.parameters_mut(), &flat)?;
        }
    }
    Ok(Trained {
        network: net,
        log,
        steps: opt.step,
    })
}

/// Trains at the configured precision and packages the result as a checkpoint.
pub fn train_checkpoint(
    res: &ResolutionSpec,
    dataset: &Dataset,
    soft: Option<&SoftLabelSet>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainingLog)> {
    match cfg.precision {
        Precision::F32 => {
            let t = train::<f32>(res, dataset, soft, cfg)?;
            Ok((Checkpoint::from_network(&t.network, res.stored_size, t.steps), t.log))
        }
        Precision::F64 => {
            let t = train::<f64>(res, dataset, soft, cfg)?;
            Ok((Checkpoint::from_network(&t.network, res.stored_size, t.steps), t.log))
        }
    }
}
