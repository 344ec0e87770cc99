//! Layer kinds with explicit forward and backward passes.
//!
//! Activations are laid out NCHW for spatial layers and `[N, F]` for dense
//! and softmax layers. Every reduction runs in a fixed row-major order with a
//! single accumulator, so results are bitwise reproducible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::tensor::{cast, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
            bias: false,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            epsilon: DEFAULT_BN_EPSILON,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::GlobalAvgPool => "globalavgpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Conv and dense layers; the layers counted as "weighted" in depth comparisons.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 {
                    return Err(invalid("conv2d extents must be positive"));
                }
                if stride == 0 {
                    return Err(invalid("conv2d stride must be >= 1"));
                }
            }
            LayerSpec::BatchNorm {
                channels,
                epsilon,
                momentum,
            } => {
                if channels == 0 {
                    return Err(invalid("batchnorm needs at least one channel"));
                }
                if !(epsilon > 0.0) {
                    return Err(invalid("batchnorm epsilon must be > 0"));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return Err(invalid("batchnorm momentum must lie in [0, 1)"));
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(invalid("maxpool2d kernel and stride must be >= 1"));
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return Err(invalid("dense extents must be positive"));
                }
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::Softmax => {}
        }
        Ok(())
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [n, c, h, w] = nchw(input, "conv2d")?;
                if c != in_channels {
                    return Err(shape(format!("conv2d expects {in_channels} channels, got {c}")));
                }
                let oh = conv_extent(h, kernel, stride, padding)?;
                let ow = conv_extent(w, kernel, stride, padding)?;
                Ok(vec![n, out_channels, oh, ow])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if !(input.len() == 2 || input.len() == 4) || input[1] != channels {
                    return Err(shape(format!(
                        "batchnorm over {channels} channels cannot take {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [n, c, h, w] = nchw(input, "maxpool2d")?;
                Ok(vec![
                    n,
                    c,
                    conv_extent(h, kernel, stride, 0)?,
                    conv_extent(w, kernel, stride, 0)?,
                ])
            }
            LayerSpec::GlobalAvgPool => {
                let [n, c, _, _] = nchw(input, "globalavgpool")?;
                Ok(vec![n, c])
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input.len() != 2 || input[1] != in_features {
                    return Err(shape(format!("dense expects [N, {in_features}], got {input:?}")));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::Softmax => {
                if input.len() != 2 {
                    return Err(shape(format!("softmax expects [N, K], got {input:?}")));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Names and shapes of the learnable parameters.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![("weight", vec![out_channels, in_channels, kernel, kernel])];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            LayerSpec::BatchNorm { channels, .. } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn running_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::BatchNorm { channels, .. } => {
                vec![("running_mean", vec![channels]), ("running_var", vec![channels])]
            }
            _ => Vec::new(),
        }
    }
}

/// `floor((in + 2*pad - kernel) / stride) + 1`, refusing empty outputs.
pub fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(shape(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn nchw(input: &[usize], what: &str) -> Result<[usize; 4]> {
    match input {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape(format!("{what} expects an NCHW input, got {input:?}"))),
    }
}

/// Learnable parameters plus (for batchnorm) running statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub params: Vec<Tensor<T>>,
    pub running: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerState<T> {
    pub fn empty() -> Self {
        Self {
            params: Vec::new(),
            running: Vec::new(),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases, unit batchnorm scale.
    pub fn init<R: Rng>(spec: &LayerSpec, rng: &mut R) -> Self {
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| match (spec, name) {
                (LayerSpec::Conv2d { .. }, "weight") | (LayerSpec::Dense { .. }, "weight") => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let len: usize = shape.iter().product();
                    let data = (0..len).map(|_| cast::<T>(rng.gen_range(-bound..bound))).collect();
                    Tensor::from_vec(&shape, data).expect("param shape")
                }
                (LayerSpec::BatchNorm { .. }, "gamma") => Tensor::full(&shape, T::one()),
                _ => Tensor::zeros(&shape),
            })
            .collect();
        let running = spec
            .running_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name == "running_var" {
                    Tensor::full(&shape, T::one())
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Self { params, running }
    }

    fn check_against(&self, spec: &LayerSpec) -> Result<()> {
        let expected = spec.param_shapes();
        if expected.len() != self.params.len()
            || expected
                .iter()
                .zip(&self.params)
                .any(|((_, s), p)| s.as_slice() != p.shape())
        {
            return Err(shape(format!("{} parameters do not match spec", spec.name())));
        }
        Ok(())
    }
}

/// Per-channel batch mean and biased variance of an `[N, C]` or NCHW tensor.
pub fn batch_statistics<T: Scalar>(input: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = input.shape();
    let (n, c) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let count = cast::<T>((n * plane) as f64);
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &v in &x[base..base + plane] {
                acc += v;
            }
        }
        let m = acc / count;
        let mut acc = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &v in &x[base..base + plane] {
                let d = v - m;
                acc += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = acc / count;
    }
    (mean, var)
}

pub fn forward<T: Scalar>(spec: &LayerSpec, input: &Tensor<T>, mode: Mode, state: &LayerState<T>) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    state.check_against(spec)?;
    input.ensure_finite(spec.name())?;
    let out = match *spec {
        LayerSpec::Conv2d {
            stride, padding, bias, ..
        } => conv2d_forward(
            input,
            &state.params[0],
            if bias { Some(&state.params[1]) } else { None },
            stride,
            padding,
            &out_shape,
        ),
        LayerSpec::BatchNorm { epsilon, .. } => {
            let (mean, var) = match mode {
                Mode::Train => batch_statistics(input),
                Mode::Eval => (state.running[0].data().to_vec(), state.running[1].data().to_vec()),
            };
            batchnorm_apply(input, &state.params[0], &state.params[1], &mean, &var, epsilon)
        }
        LayerSpec::Relu => input.map(|v| if v > T::zero() { v } else { T::zero() }),
        LayerSpec::MaxPool2d { kernel, stride } => maxpool_forward(input, kernel, stride, &out_shape).0,
        LayerSpec::GlobalAvgPool => {
            let s = input.shape();
            let plane = s[2] * s[3];
            let denom = cast::<T>(plane as f64);
            let mut out = Tensor::zeros(&out_shape);
            for (o, chunk) in out.data_mut().iter_mut().zip(input.data().chunks(plane)) {
                let mut acc = T::zero();
                for &v in chunk {
                    acc += v;
                }
                *o = acc / denom;
            }
            out
        }
        LayerSpec::Dense {
            in_features,
            out_features,
        } => dense_forward(input, &state.params[0], &state.params[1], in_features, out_features),
        LayerSpec::Softmax => softmax_rows(input),
    };
    out.ensure_finite(spec.name())?;
    Ok(out)
}

/// Gradients returned by [`backward`]; `params` lines up with `LayerState::params`.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub input: Tensor<T>,
    pub params: Vec<Tensor<T>>,
}

/// Backward pass. Any intermediate the gradient needs is recomputed from
/// `input`, so the caller only keeps layer inputs around.
pub fn backward<T: Scalar>(
    spec: &LayerSpec,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
    mode: Mode,
    state: &LayerState<T>,
) -> Result<LayerGrads<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    state.check_against(spec)?;
    if upstream.shape() != out_shape.as_slice() {
        return Err(shape(format!(
            "{} upstream gradient {:?} does not match output {:?}",
            spec.name(),
            upstream.shape(),
            out_shape
        )));
    }
    let grads = match *spec {
        LayerSpec::Conv2d {
            stride, padding, bias, ..
        } => {
            let (gi, gw, gb) = conv2d_backward(input, &state.params[0], upstream, stride, padding, bias);
            let mut params = vec![gw];
            params.extend(gb);
            LayerGrads { input: gi, params }
        }
        LayerSpec::BatchNorm { epsilon, .. } => batchnorm_backward(input, upstream, mode, state, epsilon),
        LayerSpec::Relu => {
            let mut gi = upstream.clone();
            for (g, &x) in gi.data_mut().iter_mut().zip(input.data()) {
                if x <= T::zero() {
                    *g = T::zero();
                }
            }
            LayerGrads {
                input: gi,
                params: Vec::new(),
            }
        }
        LayerSpec::MaxPool2d { kernel, stride } => {
            let (_, argmax) = maxpool_forward(input, kernel, stride, &out_shape);
            let mut gi = Tensor::zeros(input.shape());
            let gd = gi.data_mut();
            for (&src, &g) in argmax.iter().zip(upstream.data()) {
                gd[src] += g;
            }
            LayerGrads {
                input: gi,
                params: Vec::new(),
            }
        }
        LayerSpec::GlobalAvgPool => {
            let s = input.shape();
            let plane = s[2] * s[3];
            let denom = cast::<T>(plane as f64);
            let mut gi = Tensor::zeros(s);
            for (chunk, &g) in gi.data_mut().chunks_mut(plane).zip(upstream.data()) {
                let v = g / denom;
                chunk.iter_mut().for_each(|x| *x = v);
            }
            LayerGrads {
                input: gi,
                params: Vec::new(),
            }
        }
        LayerSpec::Dense {
            in_features,
            out_features,
        } => dense_backward(input, &state.params[0], upstream, in_features, out_features),
        LayerSpec::Softmax => {
            let y = softmax_rows(input);
            let k = input.shape()[1];
            let mut gi = Tensor::zeros(input.shape());
            for ((yr, gr), ur) in y
                .data()
                .chunks(k)
                .zip(gi.data_mut().chunks_mut(k))
                .zip(upstream.data().chunks(k))
            {
                let mut dot = T::zero();
                for (&a, &b) in yr.iter().zip(ur) {
                    dot += a * b;
                }
                for ((g, &a), &u) in gr.iter_mut().zip(yr).zip(ur) {
                    *g = a * (u - dot);
                }
            }
            LayerGrads {
                input: gi,
                params: Vec::new(),
            }
        }
    };
    Ok(grads)
}

/// Half-open range of output positions whose tap `k` lands inside `[0, input)`.
#[inline]
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // position = o*stride + k - pad must satisfy 0 <= position < input
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad <= k {
        0
    } else {
        ((input + pad - k - 1) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    if stride == 1 {
        conv2d_forward_wide(input, weight, bias, pad, out_shape)
    } else {
        conv2d_forward_rows(input, weight, bias, stride, pad, out_shape)
    }
}

fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    pad: usize,
    bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    if stride == 1 {
        conv2d_backward_wide(input, weight, upstream, pad, bias)
    } else {
        conv2d_backward_rows(input, weight, upstream, stride, pad, bias)
    }
}

/// Zero-padded copies of every plane, each followed by `k` spare zeros so a
/// tap offset of up to `(k-1) * (w + 2p) + k - 1` stays in bounds.
struct PaddedPlanes<T> {
    data: Vec<T>,
    width: usize,
    stride: usize,
}

impl<T: Scalar> PaddedPlanes<T> {
    fn new(x: &[T], planes: usize, h: usize, w: usize, pad: usize, k: usize) -> Self {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let stride = hp * wp + k;
        let mut data = vec![T::zero(); planes * stride];
        for p in 0..planes {
            for y in 0..h {
                let dst = p * stride + (y + pad) * wp + pad;
                data[dst..dst + w].copy_from_slice(&x[(p * h + y) * w..(p * h + y + 1) * w]);
            }
        }
        Self {
            data,
            width: wp,
            stride,
        }
    }

    fn plane(&self, p: usize) -> &[T] {
        &self.data[p * self.stride..(p + 1) * self.stride]
    }
}

/// `sum a[i] * b[i]` over eight interleaved partial sums, reduced in lane order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    lanes.iter().fold(T::zero(), |acc, &l| acc + l) + tail
}

/// Stride-1 convolution over a wide grid of `oh x (w + 2p)` positions, one
/// contiguous multiply-add per kernel tap. Columns past `ow` are discarded.
/// Padding contributes exact zeros, so each output pixel accumulates the
/// same terms in the same `(ic, ky, kx)` order as the row-wise path.
fn conv2d_forward_wide<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    let [n, cin, h, w] = nchw(input.shape(), "conv2d").expect("checked");
    let (cout, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let k = weight.shape()[2];
    let padded = PaddedPlanes::new(input.data(), n * cin, h, w, pad, k);
    let wp = padded.width;
    let span = oh * wp;
    let wd = weight.data();
    let mut wide = vec![T::zero(); span];
    let mut out = Tensor::zeros(out_shape);
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..cout {
            wide.iter_mut().for_each(|v| *v = T::zero());
            for ic in 0..cin {
                let plane = padded.plane(b * cin + ic);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((oc * cin + ic) * k + ky) * k + kx];
                        let off = ky * wp + kx;
                        for (o, &i) in wide.iter_mut().zip(&plane[off..off + span]) {
                            *o += wv * i;
                        }
                    }
                }
            }
            let oplane = &mut od[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
            for oy in 0..oh {
                oplane[oy * ow..(oy + 1) * ow].copy_from_slice(&wide[oy * wp..oy * wp + ow]);
            }
            if let Some(bias) = bias {
                let bv = bias.data()[oc];
                oplane.iter_mut().for_each(|o| *o += bv);
            }
        }
    }
    out
}

fn conv2d_backward_wide<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    pad: usize,
    bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let [n, cin, h, w] = nchw(input.shape(), "conv2d").expect("checked");
    let us = upstream.shape();
    let (cout, oh, ow) = (us[1], us[2], us[3]);
    let k = weight.shape()[2];
    let padded = PaddedPlanes::new(input.data(), n * cin, h, w, pad, k);
    let (wp, ps) = (padded.width, padded.stride);
    let span = oh * wp;
    let wd = weight.data();
    let dy = upstream.data();
    let mut gpad = vec![T::zero(); n * cin * ps];
    let mut gw = Tensor::zeros(weight.shape());
    let gwd = gw.data_mut();
    let mut gwide = vec![T::zero(); span];
    for b in 0..n {
        for oc in 0..cout {
            let gplane = &dy[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
            for oy in 0..oh {
                gwide[oy * wp..oy * wp + ow].copy_from_slice(&gplane[oy * ow..(oy + 1) * ow]);
            }
            for ic in 0..cin {
                let p = b * cin + ic;
                let plane = padded.plane(p);
                let gp = &mut gpad[p * ps..(p + 1) * ps];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * cin + ic) * k + ky) * k + kx;
                        let wv = wd[widx];
                        let off = ky * wp + kx;
                        gwd[widx] += dot(&gwide, &plane[off..off + span]);
                        for (g, &u) in gp[off..off + span].iter_mut().zip(&gwide) {
                            *g += wv * u;
                        }
                    }
                }
            }
        }
    }
    let mut gi = Tensor::zeros(input.shape());
    let gid = gi.data_mut();
    for p in 0..n * cin {
        for y in 0..h {
            let src = p * ps + (y + pad) * wp + pad;
            gid[(p * h + y) * w..(p * h + y + 1) * w].copy_from_slice(&gpad[src..src + w]);
        }
    }
    let gb = bias.then(|| {
        let mut gb = Tensor::zeros(&[cout]);
        let plane = oh * ow;
        for b in 0..n {
            for oc in 0..cout {
                let mut acc = T::zero();
                for &g in &dy[(b * cout + oc) * plane..(b * cout + oc + 1) * plane] {
                    acc += g;
                }
                gb.data_mut()[oc] += acc;
            }
        }
        gb
    });
    (gi, gw, gb)
}

fn conv2d_forward_rows<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    let [n, cin, h, w] = nchw(input.shape(), "conv2d").expect("checked");
    let (cout, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let k = weight.shape()[2];
    let x = input.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(out_shape);
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..cout {
            let oplane = &mut od[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
            for ic in 0..cin {
                let iplane = &x[(b * cin + ic) * h * w..(b * cin + ic + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = valid_range(oh, h, ky, stride, pad);
                    for kx in 0..k {
                        let wv = wd[((oc * cin + ic) * k + ky) * k + kx];
                        let (x0, x1) = valid_range(ow, w, kx, stride, pad);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let irow = &iplane[iy * w..(iy + 1) * w];
                            let orow = &mut oplane[oy * ow + x0..oy * ow + x1];
                            let ix0 = x0 * stride + kx - pad;
                            if stride == 1 {
                                for (o, &i) in orow.iter_mut().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (o, &i) in orow.iter_mut().zip(irow[ix0..].iter().step_by(stride)) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias.data()[oc];
                oplane.iter_mut().for_each(|o| *o += bv);
            }
        }
    }
    out
}

fn conv2d_backward_rows<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    pad: usize,
    bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let [n, cin, h, w] = nchw(input.shape(), "conv2d").expect("checked");
    let us = upstream.shape();
    let (cout, oh, ow) = (us[1], us[2], us[3]);
    let k = weight.shape()[2];
    let x = input.data();
    let wd = weight.data();
    let dy = upstream.data();
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let gid = gi.data_mut();
    let gwd = gw.data_mut();
    let mut lane_buf = vec![T::zero(); ow];
    for b in 0..n {
        for oc in 0..cout {
            let gplane = &dy[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
            for ic in 0..cin {
                let ibase = (b * cin + ic) * h * w;
                for ky in 0..k {
                    let (y0, y1) = valid_range(oh, h, ky, stride, pad);
                    for kx in 0..k {
                        let widx = ((oc * cin + ic) * k + ky) * k + kx;
                        let wv = wd[widx];
                        let (x0, x1) = valid_range(ow, w, kx, stride, pad);
                        if x0 >= x1 {
                            continue;
                        }
                        // column-wise partial sums, reduced once per tap
                        let lanes = &mut lane_buf[..x1 - x0];
                        lanes.iter_mut().for_each(|l| *l = T::zero());
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow + x0..oy * ow + x1];
                            let ix0 = ibase + iy * w + x0 * stride + kx - pad;
                            if stride == 1 {
                                let irow = &x[ix0..ix0 + (x1 - x0)];
                                for ((l, &g), &i) in lanes.iter_mut().zip(grow).zip(irow) {
                                    *l += g * i;
                                }
                                let girow = &mut gid[ix0..ix0 + (x1 - x0)];
                                for (gi, &g) in girow.iter_mut().zip(grow) {
                                    *gi += wv * g;
                                }
                            } else {
                                for (j, &g) in grow.iter().enumerate() {
                                    let idx = ix0 + j * stride;
                                    lanes[j] += g * x[idx];
                                    gid[idx] += wv * g;
                                }
                            }
                        }
                        gwd[widx] += lanes.iter().fold(T::zero(), |a, &l| a + l);
                    }
                }
            }
        }
    }
    let gb = bias.then(|| {
        let mut gb = Tensor::zeros(&[cout]);
        let plane = oh * ow;
        for b in 0..n {
            for oc in 0..cout {
                let mut acc = T::zero();
                for &g in &dy[(b * cout + oc) * plane..(b * cout + oc + 1) * plane] {
                    acc += g;
                }
                gb.data_mut()[oc] += acc;
            }
        }
        gb
    });
    (gi, gw, gb)
}

fn batchnorm_apply<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    epsilon: f64,
) -> Tensor<T> {
    let s = input.shape();
    let c = s[1];
    let plane: usize = s[2..].iter().product();
    let eps = cast::<T>(epsilon);
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let inv = T::one() / (var[ch] + eps).sqrt();
        let (g, bt, m) = (gamma.data()[ch], beta.data()[ch], mean[ch]);
        for v in chunk.iter_mut() {
            *v = g * ((*v - m) * inv) + bt;
        }
    }
    out
}

fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    upstream: &Tensor<T>,
    mode: Mode,
    state: &LayerState<T>,
    epsilon: f64,
) -> LayerGrads<T> {
    let s = input.shape();
    let (n, c) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let eps = cast::<T>(epsilon);
    let gamma = state.params[0].data();
    let (mean, var) = match mode {
        Mode::Train => batch_statistics(input),
        Mode::Eval => (state.running[0].data().to_vec(), state.running[1].data().to_vec()),
    };
    let x = input.data();
    let dy = upstream.data();
    let mut gi = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let m = cast::<T>((n * plane) as f64);
    for ch in 0..c {
        let inv = T::one() / (var[ch] + eps).sqrt();
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for j in base..base + plane {
                let xhat = (x[j] - mean[ch]) * inv;
                sum_dy += dy[j];
                sum_dy_xhat += dy[j] * xhat;
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        let gd = gi.data_mut();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for j in base..base + plane {
                gd[j] = match mode {
                    Mode::Train => {
                        let xhat = (x[j] - mean[ch]) * inv;
                        gamma[ch] * inv / m * (m * dy[j] - sum_dy - xhat * sum_dy_xhat)
                    }
                    Mode::Eval => gamma[ch] * inv * dy[j],
                };
            }
        }
    }
    LayerGrads {
        input: gi,
        params: vec![dgamma, dbeta],
    }
}

fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    out_shape: &[usize],
) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = nchw(input.shape(), "maxpool2d").expect("checked");
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out.len()];
    let od = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            if kernel == 2 && stride == 2 {
                let r0 = &x[base + 2 * oy * w..base + (2 * oy + 1) * w];
                let r1 = &x[base + (2 * oy + 1) * w..base + (2 * oy + 2) * w];
                let orow = &mut od[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
                let arow = &mut argmax[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
                for ox in 0..ow {
                    let j = 2 * ox;
                    let (mut bv, mut bi) = (r0[j], j);
                    if r0[j + 1] > bv {
                        (bv, bi) = (r0[j + 1], j + 1);
                    }
                    if r1[j] > bv {
                        (bv, bi) = (r1[j], w + j);
                    }
                    if r1[j + 1] > bv {
                        (bv, bi) = (r1[j + 1], w + j + 1);
                    }
                    orow[ox] = bv;
                    arow[ox] = base + 2 * oy * w + bi;
                }
                continue;
            }
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for j in row..row + kernel {
                        // first maximum in scan order wins ties
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                od[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    (out, argmax)
}

fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    fin: usize,
    fout: usize,
) -> Tensor<T> {
    let n = input.shape()[0];
    let wd = weight.data();
    let mut out = Tensor::zeros(&[n, fout]);
    for b in 0..n {
        let xr = input.row(b);
        let or = out.row_mut(b);
        for o in 0..fout {
            let wr = &wd[o * fin..(o + 1) * fin];
            let mut acc = T::zero();
            for (&wv, &xv) in wr.iter().zip(xr) {
                acc += wv * xv;
            }
            or[o] = acc + bias.data()[o];
        }
    }
    out
}

fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    fin: usize,
    fout: usize,
) -> LayerGrads<T> {
    let n = input.shape()[0];
    let wd = weight.data();
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[fout]);
    for b in 0..n {
        let xr = input.row(b);
        let ur = upstream.row(b);
        let gir = gi.row_mut(b);
        for o in 0..fout {
            let u = ur[o];
            let wr = &wd[o * fin..(o + 1) * fin];
            for (g, &wv) in gir.iter_mut().zip(wr) {
                *g += wv * u;
            }
        }
        let gwd = gw.data_mut();
        for o in 0..fout {
            let u = ur[o];
            for (g, &xv) in gwd[o * fin..(o + 1) * fin].iter_mut().zip(xr) {
                *g += u * xv;
            }
        }
        for (g, &u) in gb.data_mut().iter_mut().zip(ur) {
            *g += u;
        }
    }
    LayerGrads {
        input: gi,
        params: vec![gw, gb],
    }
}

/// Max-shifted softmax along the last axis of an `[N, K]` tensor.
pub fn softmax_rows<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let k = *input.shape().last().expect("rank >= 1");
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(k) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))`, computed stably.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}
