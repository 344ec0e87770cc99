//! Sequential networks with an optional auxiliary soft-label head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{self, LayerSpec, LayerState, Mode};
use crate::error::{invalid, shape, Result};
use crate::seed::mix;
use crate::tensor::{cast, Scalar, Tensor};

/// A layer stack ending in `dense -> softmax` over `num_outputs` classes.
///
/// When `aux_outputs` is set, a second dense head reads the same features as
/// the final dense layer and predicts a distribution over that many classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_size: usize,
    pub input_channels: usize,
    pub num_outputs: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub aux_outputs: Option<usize>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_channels == 0 || self.num_outputs == 0 {
            return Err(invalid("network extents must be positive"));
        }
        let n = self.layers.len();
        if n < 2 || self.layers[n - 1] != LayerSpec::Softmax {
            return Err(invalid("network must end with a softmax layer"));
        }
        match self.layers[n - 2] {
            LayerSpec::Dense { out_features, .. } if out_features == self.num_outputs => {}
            _ => {
                return Err(invalid(format!(
                    "network must end with dense({}) -> softmax",
                    self.num_outputs
                )))
            }
        }
        if self.aux_outputs == Some(0) {
            return Err(invalid("auxiliary head needs at least one output"));
        }
        let mut s = vec![1, self.input_channels, self.input_size, self.input_size];
        for l in &self.layers {
            s = l.output_shape(&s)?;
        }
        Ok(())
    }

    /// Activation shape entering each layer for a batch of one, plus the final output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut s = vec![1, self.input_channels, self.input_size, self.input_size];
        let mut out = vec![s.clone()];
        for l in &self.layers {
            s = l.output_shape(&s)?;
            out.push(s.clone());
        }
        Ok(out)
    }

    /// Spatial extent entering the global average pool, if the stack has one.
    pub fn pre_pool_extent(&self) -> Result<Option<(usize, usize)>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .position(|l| *l == LayerSpec::GlobalAvgPool)
            .map(|i| (shapes[i][2], shapes[i][3])))
    }

    pub fn weighted_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count()
    }

    /// Index of the final dense layer (the main classifier head).
    pub fn head_index(&self) -> usize {
        self.layers.len() - 2
    }

    pub fn feature_width(&self) -> usize {
        match self.layers[self.head_index()] {
            LayerSpec::Dense { in_features, .. } => in_features,
            _ => unreachable!("validated"),
        }
    }

    pub fn aux_spec(&self) -> Option<LayerSpec> {
        self.aux_outputs.map(|k| LayerSpec::dense(self.feature_width(), k))
    }

    pub fn with_aux(mut self, k2: Option<usize>) -> Self {
        self.aux_outputs = k2;
        self
    }

    pub fn with_outputs(mut self, k1: usize) -> Self {
        let head = self.head_index();
        if let LayerSpec::Dense { out_features, .. } = &mut self.layers[head] {
            *out_features = k1;
        }
        self.num_outputs = k1;
        self
    }
}

const AUX_INIT_STREAM: u64 = 0xA0C5;

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerState<T>>,
    pub aux: Option<LayerState<T>>,
}

/// Activations recorded by a training forward pass.
pub struct Trace<T> {
    /// Input of every layer up to and including the main head.
    pub inputs: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
    pub aux_logits: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub layers: Vec<Vec<Tensor<T>>>,
    pub aux: Option<Vec<Tensor<T>>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Flattened in the same order as [`Network::parameters_mut`].
    pub fn flat(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.layers.iter().flatten().collect();
        if let Some(aux) = &self.aux {
            v.extend(aux.iter());
        }
        v
    }
}

impl<T: Scalar> Network<T> {
    /// Seeded initialization. The auxiliary head draws from its own stream so
    /// the shared layers come out identical with or without it.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec.layers.iter().map(|l| LayerState::init(l, &mut rng)).collect();
        let aux = spec.aux_spec().map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, AUX_INIT_STREAM]));
            LayerState::init(&l, &mut rng)
        });
        Ok(Self { spec, layers, aux })
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let s = input.shape();
        if s.len() != 4
            || s[1] != self.spec.input_channels
            || s[2] != self.spec.input_size
            || s[3] != self.spec.input_size
        {
            return Err(shape(format!(
                "network {} expects [N, {}, {}, {}], got {s:?}",
                self.spec.name, self.spec.input_channels, self.spec.input_size, self.spec.input_size
            )));
        }
        Ok(())
    }

    /// Class probabilities for a batch, all layers including the softmax.
    pub fn probabilities(&self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (spec, state) in self.spec.layers.iter().zip(&self.layers) {
            x = layer::forward(spec, &x, mode, state)?;
        }
        Ok(x)
    }

    /// Eval-mode softmax outputs of both heads.
    pub fn head_probabilities(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let trace = self.run(input, Mode::Eval)?;
        let p = layer::softmax_rows(&trace.logits);
        let q = trace.aux_logits.as_ref().map(layer::softmax_rows);
        Ok((p, q))
    }

    /// Forward to the pre-softmax logits, keeping every layer input.
    pub fn run(&self, input: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.check_input(input)?;
        let head = self.spec.head_index();
        let mut inputs = Vec::with_capacity(head + 1);
        let mut x = input.clone();
        for (spec, state) in self.spec.layers[..=head].iter().zip(&self.layers) {
            let y = layer::forward(spec, &x, mode, state)?;
            inputs.push(std::mem::replace(&mut x, y));
        }
        let aux_logits = match (&self.aux, self.spec.aux_spec()) {
            (Some(state), Some(spec)) => Some(layer::forward(&spec, &inputs[head], mode, state)?),
            _ => None,
        };
        Ok(Trace {
            inputs,
            logits: x,
            aux_logits,
        })
    }

    /// Backpropagates logit gradients of both heads through the stack.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_logits: &Tensor<T>,
        grad_aux_logits: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<Gradients<T>> {
        let head = self.spec.head_index();
        let mut grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); head + 1];
        let g = layer::backward(
            &self.spec.layers[head],
            &trace.inputs[head],
            grad_logits,
            mode,
            &self.layers[head],
        )?;
        grads[head] = g.params;
        let mut upstream = g.input;
        let aux = match (&self.aux, self.spec.aux_spec(), grad_aux_logits) {
            (Some(state), Some(spec), Some(ga)) => {
                let g = layer::backward(&spec, &trace.inputs[head], ga, mode, state)?;
                for (u, &v) in upstream.data_mut().iter_mut().zip(g.input.data()) {
                    *u += v;
                }
                Some(g.params)
            }
            (Some(state), _, None) => Some(state.params.iter().map(|p| Tensor::zeros(p.shape())).collect()),
            _ => None,
        };
        for i in (0..head).rev() {
            let g = layer::backward(&self.spec.layers[i], &trace.inputs[i], &upstream, mode, &self.layers[i])?;
            grads[i] = g.params;
            upstream = g.input;
        }
        // the softmax layer carries no parameters
        grads.push(Vec::new());
        Ok(Gradients {
            layers: grads,
            aux,
            input: upstream,
        })
    }

    /// Exponential moving average of batchnorm statistics from a train-mode trace.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        for (i, spec) in self.spec.layers.iter().enumerate().take(trace.inputs.len()) {
            if let LayerSpec::BatchNorm { momentum, .. } = *spec {
                let (mean, var) = layer::batch_statistics(&trace.inputs[i]);
                let mo = cast::<T>(momentum);
                let state = &mut self.layers[i];
                for (r, m) in state.running[0].data_mut().iter_mut().zip(mean) {
                    *r = mo * *r + (T::one() - mo) * m;
                }
                for (r, v) in state.running[1].data_mut().iter_mut().zip(var) {
                    *r = mo * *r + (T::one() - mo) * v;
                }
            }
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.layers.iter().flat_map(|l| l.params.iter()).collect();
        if let Some(aux) = &self.aux {
            v.extend(aux.params.iter());
        }
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect();
        if let Some(aux) = &mut self.aux {
            v.extend(aux.params.iter_mut());
        }
        v
    }

    /// Stable names for every stored tensor, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (spec, state)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            for ((name, _), t) in spec.param_shapes().iter().zip(&state.params) {
                out.push((format!("layers.{i}.{name}"), t));
            }
            for ((name, _), t) in spec.running_shapes().iter().zip(&state.running) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        if let (Some(spec), Some(state)) = (self.spec.aux_spec(), &self.aux) {
            for ((name, _), t) in spec.param_shapes().iter().zip(&state.params) {
                out.push((format!("aux.{name}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let aux_spec = self.spec.aux_spec();
        for (i, (spec, state)) in self.spec.layers.iter().zip(self.layers.iter_mut()).enumerate() {
            let names: Vec<_> = spec
                .param_shapes()
                .into_iter()
                .chain(spec.running_shapes())
                .map(|(n, _)| n)
                .collect();
            for (name, t) in names
                .into_iter()
                .zip(state.params.iter_mut().chain(state.running.iter_mut()))
            {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        if let (Some(spec), Some(state)) = (aux_spec, self.aux.as_mut()) {
            for ((name, _), t) in spec.param_shapes().iter().zip(state.params.iter_mut()) {
                out.push((format!("aux.{name}"), t));
            }
        }
        out
    }

    pub fn convert<U: Scalar>(&self) -> Network<U> {
        let conv = |s: &LayerState<T>| LayerState {
            params: s.params.iter().map(|t| t.convert()).collect(),
            running: s.running.iter().map(|t| t.convert()).collect(),
        };
        Network {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(conv).collect(),
            aux: self.aux.as_ref().map(conv),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize) -> NetworkSpec {
        NetworkSpec {
            name: "tiny".into(),
            input_size: 6,
            input_channels: 2,
            num_outputs: k,
            layers: vec![
                LayerSpec::conv(2, 3, 3, 1),
                LayerSpec::batchnorm(3),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::dense(3, k),
                LayerSpec::Softmax,
            ],
            aux_outputs: None,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(tiny(4).validate().is_ok());
        let mut bad = tiny(4);
        bad.layers.pop();
        assert!(bad.validate().is_err());
        let mut bad = tiny(4);
        bad.num_outputs = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn aux_head_does_not_perturb_shared_init() {
        let a = Network::<f64>::init(tiny(4), 7).unwrap();
        let b = Network::<f64>::init(tiny(4).with_aux(Some(3)), 7).unwrap();
        assert_eq!(a.layers, b.layers);
        assert!(b.aux.is_some());
    }

    #[test]
    fn probabilities_rows_sum_to_one() {
        let net = Network::<f64>::init(tiny(4), 1).unwrap();
        let x = Tensor::from_vec(&[2, 2, 6, 6], (0..144).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let p = net.probabilities(&x, Mode::Eval).unwrap();
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn named_tensors_cover_params_and_running_stats() {
        let net = Network::<f32>::init(tiny(4).with_aux(Some(2)), 0).unwrap();
        let names: Vec<String> = net.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "layers.0.weight",
                "layers.1.gamma",
                "layers.1.beta",
                "layers.1.running_mean",
                "layers.1.running_var",
                "layers.5.weight",
                "layers.5.bias",
                "aux.weight",
                "aux.bias"
            ]
        );
    }
}
