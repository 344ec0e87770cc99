//! Randomized layer configurations and a finite-difference check of the
//! library's backward pass against them.

use mrdis::nn::layer::{self, LayerSpec, LayerState, Mode};
use mrdis::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fd_gradient, max_relative_error};

pub const KINDS: [&str; 8] = [
    "conv2d",
    "batchnorm-train",
    "batchnorm-eval",
    "relu",
    "maxpool2d",
    "globalavgpool",
    "dense",
    "softmax",
];

pub struct Case {
    pub spec: LayerSpec,
    pub input: Tensor<f64>,
    pub state: LayerState<f64>,
    pub mode: Mode,
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

/// Random parameters everywhere, so zero biases or unit scales cannot hide
/// a missing term.
fn random_state(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> LayerState<f64> {
    let mut state = LayerState::init(spec, rng);
    for (p, (name, _)) in state.params.iter_mut().zip(spec.param_shapes()) {
        let (lo, hi) = if name == "gamma" { (0.5, 1.5) } else { (-1.0, 1.0) };
        let v = uniform(rng, p.len(), lo, hi);
        p.data_mut().copy_from_slice(&v);
    }
    for (r, (name, _)) in state.running.iter_mut().zip(spec.running_shapes()) {
        let (lo, hi) = if name.ends_with("var") { (0.2, 2.0) } else { (-0.5, 0.5) };
        let v = uniform(rng, r.len(), lo, hi);
        r.data_mut().copy_from_slice(&v);
    }
    state
}

pub fn random_case(kind: &str, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mode = Mode::Train;
    let (spec, shape, data): (LayerSpec, Vec<usize>, Option<Vec<f64>>) = match kind {
        "conv2d" => {
            let (ci, co, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..k);
            let (h, w) = (rng.gen_range(k..=6), rng.gen_range(k..=6));
            let spec = LayerSpec::Conv2d {
                in_channels: ci,
                out_channels: co,
                kernel: k,
                stride,
                padding,
                bias: rng.gen_bool(0.5),
            };
            (spec, vec![rng.gen_range(1..=2), ci, h, w], None)
        }
        "batchnorm-train" | "batchnorm-eval" => {
            if kind == "batchnorm-eval" {
                mode = Mode::Eval;
            }
            let c = rng.gen_range(1..=3);
            let shape = if rng.gen_bool(0.5) {
                vec![rng.gen_range(4..=6), c]
            } else {
                vec![rng.gen_range(1..=3), c, rng.gen_range(2..=3), rng.gen_range(2..=3)]
            };
            (LayerSpec::batchnorm(c), shape, None)
        }
        "relu" => {
            let shape = vec![rng.gen_range(1..=2), rng.gen_range(1..=3), 3, rng.gen_range(2..=4)];
            let len = shape.iter().product();
            // away from the kink, where the derivative is one-sided
            let data = (0..len)
                .map(|_| {
                    let m = rng.gen_range(0.05..1.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            (LayerSpec::Relu, shape, Some(data))
        }
        "maxpool2d" => {
            let (k, s) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let shape = vec![
                rng.gen_range(1..=2),
                rng.gen_range(1..=2),
                rng.gen_range(k..=7),
                rng.gen_range(k..=7),
            ];
            let len: usize = shape.iter().product();
            // distinct values 0.01 apart, so no step flips a window's maximum
            let mut data: Vec<f64> = (0..len).map(|i| i as f64 * 0.01 - 0.3).collect();
            data.shuffle(&mut rng);
            (LayerSpec::MaxPool2d { kernel: k, stride: s }, shape, Some(data))
        }
        "globalavgpool" => {
            let shape = vec![
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
            ];
            (LayerSpec::GlobalAvgPool, shape, None)
        }
        "dense" => {
            let (i, o) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
            (LayerSpec::dense(i, o), vec![rng.gen_range(1..=3), i], None)
        }
        "softmax" => {
            let shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=6)];
            let len = shape.iter().product();
            (LayerSpec::Softmax, shape, Some(uniform(&mut rng, len, -3.0, 3.0)))
        }
        other => panic!("unknown layer kind {other}"),
    };
    let len = shape.iter().product();
    let data = data.unwrap_or_else(|| uniform(&mut rng, len, -1.0, 1.0));
    let state = random_state(&spec, &mut rng);
    Case {
        spec,
        input: tensor(&shape, data),
        state,
        mode,
    }
}

/// Largest relative error between `layer::backward` and central differences
/// of the projection `sum(r * forward(x))`, over the input and every parameter.
pub fn layer_gradient_error(case: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = layer::forward(&case.spec, &case.input, case.mode, &case.state).unwrap();
    let r = tensor(out.shape(), uniform(&mut rng, out.len(), -1.0, 1.0));
    let project = |x: &Tensor<f64>, st: &LayerState<f64>| -> f64 {
        let y = layer::forward(&case.spec, x, case.mode, st).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let grads = layer::backward(&case.spec, &case.input, &r, case.mode, &case.state).unwrap();

    let shape = case.input.shape().to_vec();
    let numeric = fd_gradient(case.input.data(), |x| project(&tensor(&shape, x.to_vec()), &case.state));
    let mut worst = max_relative_error(grads.input.data(), &numeric);

    assert_eq!(grads.params.len(), case.state.params.len());
    for (p, g) in grads.params.iter().enumerate() {
        let numeric = fd_gradient(case.state.params[p].data(), |v| {
            let mut st = case.state.clone();
            st.params[p].data_mut().copy_from_slice(v);
            project(&case.input, &st)
        });
        worst = worst.max(max_relative_error(g.data(), &numeric));
    }
    worst
}
