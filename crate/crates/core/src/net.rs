//! Layered feed-forward networks with exact backpropagation.
//!
//! A network is a [`NetworkSpec`] (the layer sequence) plus
//! [`NetworkParams`] (the learned weights). Activations are always rank-3
//! tensors `[channels, height, width]`. Convolutions are valid (no padding);
//! the fully-connected and softmax layers expect a `1x1` spatial input, which
//! lets the same network run densely over whole planes.
//!
//! The softmax layer owns the final linear projection onto the class logits,
//! so a spec such as `conv, relu, pool, ..., fc, relu, softmax` has exactly
//! one hidden fully-connected layer and a two-way output.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// One layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { kernel_h: usize, kernel_w: usize, out_channels: usize },
    MaxPool { kernel_h: usize, kernel_w: usize, stride: usize },
    Relu,
    FullyConnected { out_channels: usize },
    Softmax,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, Self::Conv { .. } | Self::FullyConnected { .. } | Self::Softmax)
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Conv { kernel_h, kernel_w, out_channels } => {
                write!(f, "conv{kernel_h}x{kernel_w}:{out_channels}")
            }
            Self::MaxPool { kernel_h, kernel_w, stride } => {
                write!(f, "pool{kernel_h}x{kernel_w}/{stride}")
            }
            Self::Relu => f.write_str("relu"),
            Self::FullyConnected { out_channels } => write!(f, "fc:{out_channels}"),
            Self::Softmax => f.write_str("softmax"),
        }
    }
}

fn parse_hw(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once('x')?;
    Some((h.parse().ok()?, w.parse().ok()?))
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// Parses `conv5x5:16`, `pool2x2/2`, `relu`, `fc:32` or `softmax`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Spec(format!("cannot parse layer `{s}`"));
        if s == "relu" {
            return Ok(Self::Relu);
        }
        if s == "softmax" {
            return Ok(Self::Softmax);
        }
        if let Some(rest) = s.strip_prefix("conv") {
            let (hw, oc) = rest.split_once(':').ok_or_else(bad)?;
            let (kernel_h, kernel_w) = parse_hw(hw).ok_or_else(bad)?;
            let out_channels = oc.parse().map_err(|_| bad())?;
            return Ok(Self::Conv { kernel_h, kernel_w, out_channels });
        }
        if let Some(rest) = s.strip_prefix("pool") {
            let (hw, stride) = rest.split_once('/').ok_or_else(bad)?;
            let (kernel_h, kernel_w) = parse_hw(hw).ok_or_else(bad)?;
            let stride = stride.parse().map_err(|_| bad())?;
            return Ok(Self::MaxPool { kernel_h, kernel_w, stride });
        }
        if let Some(oc) = s.strip_prefix("fc:") {
            let out_channels = oc.parse().map_err(|_| bad())?;
            return Ok(Self::FullyConnected { out_channels });
        }
        Err(bad())
    }
}

/// Layer sequence of a square-patch, two-class classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_side: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl NetworkSpec {
    /// Full-size architecture for 65x65 patches: four convolutions, one
    /// hidden fully-connected layer and a softmax output.
    pub fn base() -> Self {
        use LayerSpec::*;
        let conv = |k| Conv { kernel_h: k, kernel_w: k, out_channels: 48 };
        let pool = MaxPool { kernel_h: 2, kernel_w: 2, stride: 2 };
        Self {
            input_side: 65,
            input_channels: 1,
            layers: vec![
                conv(5),
                Relu,
                pool,
                conv(5),
                Relu,
                pool,
                conv(5),
                Relu,
                pool,
                conv(4),
                Relu,
                FullyConnected { out_channels: 200 },
                Relu,
                Softmax,
            ],
            class_count: 2,
        }
    }

    /// Small architecture for 17x17 patches that trains in seconds on a CPU.
    ///
    /// 17 -conv5-> 13 -pool2-> 6 -conv5-> 2 -pool2-> 1 -> fc 32 -> softmax.
    pub fn desk() -> Self {
        use LayerSpec::*;
        let conv = Conv { kernel_h: 5, kernel_w: 5, out_channels: 16 };
        let pool = MaxPool { kernel_h: 2, kernel_w: 2, stride: 2 };
        Self {
            input_side: 17,
            input_channels: 1,
            layers: vec![
                conv,
                Relu,
                pool,
                conv,
                Relu,
                pool,
                FullyConnected { out_channels: 32 },
                Relu,
                Softmax,
            ],
            class_count: 2,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_side, self.input_side]
    }

    /// Checks the layer sequence and returns the activation shape before the
    /// first layer and after every layer (`len == layers.len() + 1`).
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.class_count != 2 {
            return Err(Error::Spec(format!("class_count must be 2, got {}", self.class_count)));
        }
        if self.input_side == 0 || self.input_side % 2 == 0 {
            return Err(Error::Spec(format!("input_side must be odd, got {}", self.input_side)));
        }
        if self.input_channels == 0 {
            return Err(Error::Spec("input_channels must be >= 1".into()));
        }
        let softmax_count = self.layers.iter().filter(|l| **l == LayerSpec::Softmax).count();
        if softmax_count != 1 || self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::Spec("softmax must appear exactly once, as the last layer".into()));
        }
        let mut shapes = vec![self.input_shape()];
        let mut cur = self.input_shape();
        for (i, layer) in self.layers.iter().enumerate() {
            let [c, h, w] = cur;
            cur = match *layer {
                LayerSpec::Conv { kernel_h, kernel_w, out_channels } => {
                    if kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
                        return Err(Error::Spec(format!("layer {i}: empty conv")));
                    }
                    if kernel_h > h || kernel_w > w {
                        return Err(Error::Spec(format!(
                            "layer {i}: conv {kernel_h}x{kernel_w} larger than input {h}x{w}"
                        )));
                    }
                    [out_channels, h - kernel_h + 1, w - kernel_w + 1]
                }
                LayerSpec::MaxPool { kernel_h, kernel_w, stride } => {
                    if kernel_h == 0 || kernel_w == 0 || stride == 0 {
                        return Err(Error::Spec(format!("layer {i}: empty pool")));
                    }
                    if kernel_h > h || kernel_w > w {
                        return Err(Error::Spec(format!(
                            "layer {i}: pool {kernel_h}x{kernel_w} larger than input {h}x{w}"
                        )));
                    }
                    [c, (h - kernel_h) / stride + 1, (w - kernel_w) / stride + 1]
                }
                LayerSpec::Relu => cur,
                LayerSpec::FullyConnected { out_channels } => {
                    if h != 1 || w != 1 {
                        return Err(Error::Spec(format!(
                            "layer {i}: fully-connected layer needs 1x1 input, got {h}x{w}"
                        )));
                    }
                    if out_channels == 0 {
                        return Err(Error::Spec(format!("layer {i}: empty fc")));
                    }
                    [out_channels, 1, 1]
                }
                LayerSpec::Softmax => {
                    if h != 1 || w != 1 {
                        return Err(Error::Spec(format!(
                            "layer {i}: softmax needs 1x1 input, got {h}x{w}"
                        )));
                    }
                    [self.class_count, 1, 1]
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Weight and bias shapes for every layer, `None` for parameterless ones.
    pub fn param_shapes(&self) -> Result<Vec<Option<(Vec<usize>, usize)>>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let [c, _, _] = shapes[i];
                match *layer {
                    LayerSpec::Conv { kernel_h, kernel_w, out_channels } => {
                        Some((vec![out_channels, c, kernel_h, kernel_w], out_channels))
                    }
                    LayerSpec::FullyConnected { out_channels } => {
                        Some((vec![out_channels, c], out_channels))
                    }
                    LayerSpec::Softmax => Some((vec![self.class_count, c], self.class_count)),
                    _ => None,
                }
            })
            .collect())
    }

    /// Key=value text form, the same syntax the run config uses.
    pub fn to_text(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        format!(
            "input_side={}\ninput_channels={}\nclass_count={}\nlayers={}\n",
            self.input_side,
            self.input_channels,
            self.class_count,
            layers.join(",")
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut input_side = None;
        let mut input_channels = 1;
        let mut class_count = 2;
        let mut layers = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Spec(format!("expected key=value, got `{line}`")))?;
            let num = |v: &str| {
                v.trim().parse::<usize>().map_err(|_| Error::Spec(format!("bad number `{v}`")))
            };
            match k.trim() {
                "input_side" => input_side = Some(num(v)?),
                "input_channels" => input_channels = num(v)?,
                "class_count" => class_count = num(v)?,
                "layers" => layers = Some(parse_layers(v)?),
                other => return Err(Error::Spec(format!("unknown key `{other}`"))),
            }
        }
        let spec = Self {
            input_side: input_side.ok_or_else(|| Error::Spec("missing input_side".into()))?,
            input_channels,
            layers: layers.ok_or_else(|| Error::Spec("missing layers".into()))?,
            class_count,
        };
        spec.shapes()?;
        Ok(spec)
    }
}

/// Parses a comma-separated layer list such as `conv5x5:16,relu,softmax`.
pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

/// Weights and biases of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub biases: Tensor,
}

/// Learned parameters, one slot per layer of the matching spec.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Option<LayerParams>>,
}

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let layers = spec
            .param_shapes()?
            .into_iter()
            .map(|s| {
                s.map(|(w, b)| LayerParams { weights: Tensor::zeros(&w), biases: Tensor::zeros(&[b]) })
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weights: Tensor::zeros(p.weights.shape()),
                        biases: Tensor::zeros(p.biases.shape()),
                    })
                })
                .collect(),
        }
    }

    /// Verifies every tensor shape against `spec`.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.param_shapes()?;
        if expected.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "spec has {} layers, params have {}",
                expected.len(),
                self.layers.len()
            )));
        }
        for (i, (e, p)) in expected.iter().zip(&self.layers).enumerate() {
            let ok = match (e, p) {
                (None, None) => true,
                (Some((w, b)), Some(p)) => p.weights.shape() == &w[..] && p.biases.shape() == [*b],
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!("layer {i}: parameter shapes disagree with spec")));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.slices().map(<[f64]>::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Weight then bias slices of every parameterized layer, in layer order.
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [p.weights.data(), p.biases.data()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [p.weights.data_mut(), p.biases.data_mut()])
    }

    /// Reads the `i`-th scalar in [`slices`](Self::slices) order.
    pub fn get(&self, mut i: usize) -> f64 {
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut i: usize, value: f64) {
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += other`, elementwise in a fixed order.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for x in s {
                *x *= factor;
            }
        }
    }
}

/// He-initialized parameters: weights drawn from `N(0, 2 / fan_in)`, biases 0.
pub fn init_params(spec: &NetworkSpec, seed_value: u64) -> Result<NetworkParams> {
    let mut params = NetworkParams::zeros(spec)?;
    let mut rng = seed::rng(seed_value);
    for p in params.layers.iter_mut().flatten() {
        let fan_in: usize = p.weights.shape()[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::Spec(e.to_string()))?;
        for w in p.weights.data_mut() {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

/// A labeled training patch. `label` is 1 for membrane, 0 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub patch: Tensor,
    pub label: u8,
}

/// Per-layer values kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Activations {
    /// `values[0]` is the input, `values[i + 1]` the output of layer `i`.
    values: Vec<Tensor>,
    /// Flat input index of each pooled maximum, empty for other layers.
    pool_argmax: Vec<Vec<usize>>,
    logits: Vec<f64>,
}

impl Activations {
    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probabilities(&self) -> &[f64] {
        self.values.last().map(Tensor::data).unwrap_or(&[])
    }

    /// Cross-entropy of the true class, computed from the logits.
    pub fn loss(&self, label: u8) -> f64 {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + self.logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        lse - self.logits[label as usize]
    }
}

fn check_input(spec: &NetworkSpec, patch: &Tensor) -> Result<()> {
    let expected = spec.input_shape();
    if patch.shape() != expected {
        return Err(Error::Shape(format!(
            "patch shape {:?} does not match network input {:?}",
            patch.shape(),
            expected
        )));
    }
    Ok(())
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Output width below which [`conv_forward`] loops per output value.
const NARROW_OUTPUT: usize = 8;

/// Valid 2-D convolution (cross-correlation).
///
/// Each output accumulates `bias + sum_c sum_ky sum_kx w * x` in exactly that
/// order, so results are bit-identical to a straightforward nested loop.
pub fn conv_forward(input: &Tensor, weights: &Tensor, biases: &Tensor) -> Tensor {
    let (c, h, w) = dims3(input);
    let ws = weights.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    debug_assert_eq!(ws[1], c);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; oc * oh * ow];
    if ow < NARROW_OUTPUT {
        // Same per-output order, but without row loops too short to pay off.
        let kernel = c * kh * kw;
        for (o, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
            let wo = &wt[o * kernel..(o + 1) * kernel];
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = biases.data()[o];
                    for ic in 0..c {
                        for ky in 0..kh {
                            let row = &x[ic * h * w + (y + ky) * w + xo..][..kw];
                            let wrow = &wo[(ic * kh + ky) * kw..][..kw];
                            for (wv, v) in wrow.iter().zip(row) {
                                acc += wv * v;
                            }
                        }
                    }
                    plane[y * ow + xo] = acc;
                }
            }
        }
        return Tensor::new(vec![oc, oh, ow], out).expect("conv output shape");
    }
    for (o, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        plane.fill(biases.data()[o]);
        for ic in 0..c {
            let inp = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((o * c + ic) * kh + ky) * kw + kx];
                    for y in 0..oh {
                        let start = (y + ky) * w + kx;
                        let src = &inp[start..start + ow];
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out).expect("conv output shape")
}

/// Max pooling; ties go to the row-major earliest element of the window.
/// Returns the output and the flat input index of every maximum.
pub fn maxpool_forward(
    input: &Tensor,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
) -> (Tensor, Vec<usize>) {
    let (c, h, w) = dims3(input);
    let oh = (h - kernel_h) / stride + 1;
    let ow = (w - kernel_w) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * stride * w + ox * stride;
                let mut best = x[best_i];
                for ky in 0..kernel_h {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..kernel_w {
                        let v = x[row + kx];
                        if v > best {
                            best = v;
                            best_i = row + kx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (Tensor::new(vec![c, oh, ow], out).expect("pool output shape"), arg)
}

fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu shape")
}

/// `W x + b` on a `[c, 1, 1]` input.
fn linear(input: &Tensor, weights: &Tensor, biases: &Tensor) -> Vec<f64> {
    let x = input.data();
    let n = x.len();
    weights
        .data()
        .chunks_exact(n)
        .zip(biases.data())
        .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (w, v)| acc + w * v))
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct LayerOutput {
    value: Tensor,
    argmax: Vec<usize>,
    logits: Vec<f64>,
}

fn layer_forward(layer: &LayerSpec, params: Option<&LayerParams>, input: &Tensor) -> LayerOutput {
    let plain = |value| LayerOutput { value, argmax: Vec::new(), logits: Vec::new() };
    match *layer {
        LayerSpec::Conv { .. } => {
            let p = params.expect("conv params");
            plain(conv_forward(input, &p.weights, &p.biases))
        }
        LayerSpec::MaxPool { kernel_h, kernel_w, stride } => {
            let (value, argmax) = maxpool_forward(input, kernel_h, kernel_w, stride);
            LayerOutput { value, argmax, logits: Vec::new() }
        }
        LayerSpec::Relu => plain(relu_forward(input)),
        LayerSpec::FullyConnected { .. } => {
            let p = params.expect("fc params");
            let out = linear(input, &p.weights, &p.biases);
            let n = out.len();
            plain(Tensor::new(vec![n, 1, 1], out).expect("fc shape"))
        }
        LayerSpec::Softmax => {
            let p = params.expect("softmax params");
            let logits = linear(input, &p.weights, &p.biases);
            let probs = softmax(&logits);
            let n = probs.len();
            LayerOutput {
                value: Tensor::new(vec![n, 1, 1], probs).expect("softmax shape"),
                argmax: Vec::new(),
                logits,
            }
        }
    }
}

fn check_finite(t: &Tensor, layer: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activation of layer {layer}")))
    }
}

/// Runs the network on one patch, keeping the activations for [`backward`].
/// Returns the membrane (class 1) probability.
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    patch: &Tensor,
) -> Result<(f64, Activations)> {
    check_input(spec, patch)?;
    params.check(spec)?;
    let mut values = Vec::with_capacity(spec.layers.len() + 1);
    let mut pool_argmax = Vec::with_capacity(spec.layers.len());
    let mut logits = Vec::new();
    values.push(patch.clone());
    for (i, layer) in spec.layers.iter().enumerate() {
        let out = layer_forward(layer, params.layers[i].as_ref(), &values[i]);
        check_finite(&out.value, i)?;
        values.push(out.value);
        pool_argmax.push(out.argmax);
        if !out.logits.is_empty() {
            logits = out.logits;
        }
    }
    let acts = Activations { values, pool_argmax, logits };
    Ok((acts.probabilities()[1], acts))
}

/// Membrane probability without keeping a cache.
pub fn predict(spec: &NetworkSpec, params: &NetworkParams, patch: &Tensor) -> Result<f64> {
    check_input(spec, patch)?;
    params.check(spec)?;
    predict_from(spec, params, 0, patch.clone())
}

/// Continues a forward pass from the input of layer `start`.
///
/// Callers are responsible for `activation` having the shape that layer
/// expects; used by inference paths that share early-layer work.
pub fn predict_from(
    spec: &NetworkSpec,
    params: &NetworkParams,
    start: usize,
    activation: Tensor,
) -> Result<f64> {
    let mut cur = activation;
    for (i, layer) in spec.layers.iter().enumerate().skip(start) {
        cur = layer_forward(layer, params.layers[i].as_ref(), &cur).value;
        check_finite(&cur, i)?;
    }
    Ok(cur.data()[1])
}

/// Exact gradient of the cross-entropy loss of `label` with respect to every
/// parameter. Returns the gradients and the loss.
pub fn backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    acts: &Activations,
    label: u8,
) -> Result<(NetworkParams, f64)> {
    let n = spec.layers.len();
    if acts.values.len() != n + 1 || acts.pool_argmax.len() != n || acts.logits.len() != spec.class_count
    {
        return Err(Error::StaleCache(format!(
            "cache holds {} activations for a {n}-layer network",
            acts.values.len()
        )));
    }
    let shapes = spec.shapes()?;
    for (i, (v, s)) in acts.values.iter().zip(&shapes).enumerate() {
        if v.shape() != s {
            return Err(Error::StaleCache(format!("activation {i} has shape {:?}", v.shape())));
        }
    }
    if label as usize >= spec.class_count {
        return Err(Error::InvalidArgument(format!("label {label} out of range")));
    }
    params.check(spec)?;

    let loss = acts.loss(label);
    let mut grads = params.zeros_like();
    // Gradient with respect to the output of the current layer; the softmax
    // layer starts from d(loss)/d(logits) = p - onehot.
    let mut upstream: Vec<f64> = Vec::new();

    for i in (0..n).rev() {
        let input = &acts.values[i];
        let need_input_grad = i > 0;
        match spec.layers[i] {
            LayerSpec::Softmax | LayerSpec::FullyConnected { .. } => {
                let dy: Vec<f64> = if spec.layers[i] == LayerSpec::Softmax {
                    let p = acts.values[i + 1].data();
                    p.iter()
                        .enumerate()
                        .map(|(k, &pk)| pk - if k == label as usize { 1.0 } else { 0.0 })
                        .collect()
                } else {
                    std::mem::take(&mut upstream)
                };
                let p = params.layers[i].as_ref().expect("params");
                let g = grads.layers[i].as_mut().expect("grads");
                let x = input.data();
                let m = x.len();
                for (k, &d) in dy.iter().enumerate() {
                    g.biases.data_mut()[k] = d;
                    for (gw, &xv) in g.weights.data_mut()[k * m..(k + 1) * m].iter_mut().zip(x) {
                        *gw = d * xv;
                    }
                }
                if need_input_grad {
                    let mut dx = vec![0.0; m];
                    for (k, &d) in dy.iter().enumerate() {
                        for (a, &w) in dx.iter_mut().zip(&p.weights.data()[k * m..(k + 1) * m]) {
                            *a += w * d;
                        }
                    }
                    upstream = dx;
                }
            }
            LayerSpec::Relu => {
                for (u, &x) in upstream.iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            LayerSpec::MaxPool { .. } => {
                let mut dx = vec![0.0; input.len()];
                for (&d, &j) in upstream.iter().zip(&acts.pool_argmax[i]) {
                    dx[j] += d;
                }
                upstream = dx;
            }
            LayerSpec::Conv { .. } => {
                let p = params.layers[i].as_ref().expect("params");
                let g = grads.layers[i].as_mut().expect("grads");
                let dx = conv_backward(input, &p.weights, &upstream, g, need_input_grad);
                upstream = dx;
            }
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    Ok((grads, loss))
}

/// Accumulates weight and bias gradients into `grads` and returns the input
/// gradient (empty when `input_grad` is false).
fn conv_backward(
    input: &Tensor,
    weights: &Tensor,
    dy: &[f64],
    grads: &mut LayerParams,
    input_grad: bool,
) -> Vec<f64> {
    let (c, h, w) = dims3(input);
    let ws = weights.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let x = input.data();
    let wt = weights.data();
    let mut dx = if input_grad { vec![0.0; c * h * w] } else { Vec::new() };
    if ow < NARROW_OUTPUT {
        let gw = grads.weights.data_mut();
        for o in 0..oc {
            let dplane = &dy[o * oh * ow..(o + 1) * oh * ow];
            for ic in 0..c {
                let base = ic * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((o * c + ic) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let row = base + (y + ky) * w + kx;
                            for xo in 0..ow {
                                let d = dplane[y * ow + xo];
                                acc += x[row + xo] * d;
                                if input_grad {
                                    dx[row + xo] += wv * d;
                                }
                            }
                        }
                        gw[widx] = acc;
                    }
                }
            }
        }
        for (b, dplane) in grads.biases.data_mut().iter_mut().zip(dy.chunks_exact(oh * ow)) {
            *b = dplane.iter().sum();
        }
        return dx;
    }
    for o in 0..oc {
        let dplane = &dy[o * oh * ow..(o + 1) * oh * ow];
        grads.biases.data_mut()[o] = dplane.iter().sum();
        for ic in 0..c {
            let inp = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * c + ic) * kh + ky) * kw + kx;
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let start = (y + ky) * w + kx;
                        let src = &inp[start..start + ow];
                        let d = &dplane[y * ow..(y + 1) * ow];
                        acc += src.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grads.weights.data_mut()[widx] = acc;
                    if input_grad {
                        let wv = wt[widx];
                        let dxp = &mut dx[ic * h * w..(ic + 1) * h * w];
                        for y in 0..oh {
                            let start = (y + ky) * w + kx;
                            let dst = &mut dxp[start..start + ow];
                            for (a, &d) in dst.iter_mut().zip(&dplane[y * ow..(y + 1) * ow]) {
                                *a += wv * d;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Cross-entropy loss of one example.
pub fn example_loss(spec: &NetworkSpec, params: &NetworkParams, ex: &TrainExample) -> Result<f64> {
    let (_, acts) = forward(spec, params, &ex.patch)?;
    Ok(acts.loss(ex.label))
}

/// One step of SGD with classical momentum:
/// `v <- momentum * v - lr * g`, `w <- w + v`.
///
/// Nothing is modified when the update would produce a non-finite value.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    lr: f64,
    momentum: f64,
    velocity: &mut NetworkParams,
) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("lr={lr} momentum={momentum}")));
    }
    if params.param_count() != grads.param_count() || params.param_count() != velocity.param_count() {
        return Err(Error::Shape("params, grads and velocity disagree".into()));
    }
    let mut new_v = velocity.clone();
    let mut new_w = params.clone();
    for ((v, g), w) in new_v.slices_mut().zip(grads.slices()).zip(new_w.slices_mut()) {
        for ((vi, gi), wi) in v.iter_mut().zip(g).zip(w.iter_mut()) {
            *vi = momentum * *vi - lr * gi;
            *wi += *vi;
        }
    }
    if !new_w.all_finite() || !new_v.all_finite() {
        return Err(Error::NonFinite("parameter update".into()));
    }
    *params = new_w;
    *velocity = new_v;
    Ok(())
}

/// Compares analytic gradients against central finite differences and
/// returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-12)` over all parameters.
pub fn grad_check(
    spec: &NetworkSpec,
    params: &NetworkParams,
    example: &TrainExample,
    h: f64,
) -> Result<f64> {
    grad_check_with(spec, params, example, h, |spec, params, acts, label| {
        backward(spec, params, acts, label).map(|(g, _)| g)
    })
}

/// [`grad_check`] against an arbitrary gradient routine.
pub fn grad_check_with<F>(
    spec: &NetworkSpec,
    params: &NetworkParams,
    example: &TrainExample,
    h: f64,
    analytic: F,
) -> Result<f64>
where
    F: Fn(&NetworkSpec, &NetworkParams, &Activations, u8) -> Result<NetworkParams>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step h={h} outside [1e-7, 1e-3]")));
    }
    let (_, acts) = forward(spec, params, &example.patch)?;
    let grads = analytic(spec, params, &acts, example.label)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.param_count() {
        let w = params.get(i);
        probe.set(i, w + h);
        let up = example_loss(spec, &probe, example)?;
        probe.set(i, w - h);
        let down = example_loss(spec, &probe, example)?;
        probe.set(i, w);
        let numeric = (up - down) / (2.0 * h);
        let a = grads.get(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

const PARAMS_MAGIC: &[u8] = b"MRNN1\n";

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes parameters in the `MRNN1` binary format: the magic line,
/// `layers=<n>`, then per layer an ASCII shape line followed by the weights
/// and biases as little-endian `f64`.
pub fn write_params<W: Write>(params: &NetworkParams, mut out: W) -> Result<()> {
    out.write_all(PARAMS_MAGIC)?;
    writeln!(out, "layers={}", params.layers.len())?;
    for layer in &params.layers {
        match layer {
            None => writeln!(out, "w=- b=-")?,
            Some(p) => {
                writeln!(out, "w={} b={}", shape_text(p.weights.shape()), p.biases.len())?;
                for v in p.weights.data().iter().chain(p.biases.data()) {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut buf = Vec::new();
    r.read_until(b'\n', &mut buf)?;
    if buf.pop() != Some(b'\n') {
        return Err(Error::Format("unexpected end of parameter file".into()));
    }
    String::from_utf8(buf).map_err(|_| Error::Format("non-ASCII header line".into()))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated parameter payload".into()))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_params<R: BufRead>(mut input: R) -> Result<NetworkParams> {
    let mut magic = [0u8; 6];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("missing MRNN1 magic".into()))?;
    if magic != PARAMS_MAGIC {
        return Err(Error::Format("bad magic, expected MRNN1".into()));
    }
    let count_line = read_line(&mut input)?;
    let count: usize = count_line
        .strip_prefix("layers=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad layer count line `{count_line}`")))?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let line = read_line(&mut input)?;
        if line == "w=- b=-" {
            layers.push(None);
            continue;
        }
        let bad = || Error::Format(format!("bad shape line `{line}`"));
        let (w, b) = line.split_once(' ').ok_or_else(bad)?;
        let wshape: Vec<usize> = w
            .strip_prefix("w=")
            .ok_or_else(bad)?
            .split('x')
            .map(|e| e.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let blen: usize = b.strip_prefix("b=").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let wlen = wshape.iter().product();
        let weights = Tensor::new(wshape, read_f64s(&mut input, wlen)?)?;
        let biases = Tensor::new(vec![blen], read_f64s(&mut input, blen)?)?;
        layers.push(Some(LayerParams { weights, biases }));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", rest.len())));
    }
    Ok(NetworkParams { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn single_conv_spec(side: usize, k: usize) -> NetworkSpec {
        NetworkSpec {
            input_side: side,
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv { kernel_h: k, kernel_w: k, out_channels: 1 },
                LayerSpec::Softmax,
            ],
            class_count: 2,
        }
    }

    #[test]
    fn desk_and_base_specs_reduce_to_one_pixel() {
        let desk = NetworkSpec::desk().shapes().unwrap();
        assert_eq!(desk[4], [16, 2, 2]);
        assert_eq!(*desk.last().unwrap(), [2, 1, 1]);
        let base = NetworkSpec::base().shapes().unwrap();
        assert_eq!(base[10], [48, 1, 1]);
        assert_eq!(*base.last().unwrap(), [2, 1, 1]);
    }

    #[test]
    fn rejects_misplaced_softmax_and_even_input() {
        let mut spec = NetworkSpec::desk();
        spec.layers.insert(0, LayerSpec::Softmax);
        assert!(spec.shapes().is_err());
        let mut spec = NetworkSpec::desk();
        spec.input_side = 16;
        assert!(spec.shapes().is_err());
        let mut spec = NetworkSpec::desk();
        spec.layers.remove(2);
        assert!(matches!(spec.shapes(), Err(Error::Spec(_))));
    }

    #[test]
    fn spec_text_round_trip() {
        for spec in [NetworkSpec::desk(), NetworkSpec::base()] {
            assert_eq!(NetworkSpec::from_text(&spec.to_text()).unwrap(), spec);
        }
        assert!(NetworkSpec::from_text("input_side=3\nlayers=conv3x3:2,softmax\nbogus=1").is_err());
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv_forward(&input, &w, &b).data(), input.data());
    }

    #[test]
    fn summing_kernel_on_ones() {
        let input = Tensor::filled(&[1, 3, 3], 1.0);
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let out = conv_forward(&input, &w, &Tensor::zeros(&[1]));
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn symmetric_logits_give_ln2() {
        let spec = single_conv_spec(3, 3);
        let mut params = init_params(&spec, 1).unwrap();
        let soft = params.layers[1].as_mut().unwrap();
        soft.weights.data_mut().fill(0.0);
        let patch = Tensor::filled(&[1, 3, 3], 0.3);
        let (p, acts) = forward(&spec, &params, &patch).unwrap();
        assert_eq!(p, 0.5);
        let (_, loss) = backward(&spec, &params, &acts, 1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn certain_prediction_has_zero_loss_and_gradient() {
        let spec = single_conv_spec(1, 1);
        let mut params = NetworkParams::zeros(&spec).unwrap();
        let soft = params.layers[1].as_mut().unwrap();
        soft.biases.data_mut().copy_from_slice(&[-400.0, 400.0]);
        let patch = Tensor::filled(&[1, 1, 1], 0.5);
        let (p, acts) = forward(&spec, &params, &patch).unwrap();
        assert_eq!(p, 1.0);
        let (grads, loss) = backward(&spec, &params, &acts, 1).unwrap();
        assert_eq!(loss, 0.0);
        let soft_g = grads.layers[1].as_ref().unwrap();
        assert!(soft_g.weights.data().iter().chain(soft_g.biases.data()).all(|&g| g == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let spec = NetworkSpec::desk();
        let params = init_params(&spec, 0).unwrap();
        let err = forward(&spec, &params, &Tensor::zeros(&[1, 15, 15])).unwrap_err();
        assert!(err.to_string().contains("[1, 15, 15]"));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = NetworkSpec::desk();
        let params = init_params(&spec, 0).unwrap();
        let (_, acts) = forward(&spec, &params, &Tensor::filled(&[1, 17, 17], 0.5)).unwrap();
        let other = single_conv_spec(17, 17);
        let other_params = init_params(&other, 0).unwrap();
        assert!(matches!(
            backward(&other, &other_params, &acts, 0),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn sgd_plain_step() {
        let spec = single_conv_spec(1, 1);
        let mut params = NetworkParams::zeros(&spec).unwrap();
        params.set(0, 1.0);
        let mut grads = params.zeros_like();
        grads.set(0, 2.0);
        let mut vel = params.zeros_like();
        sgd_step(&mut params, &grads, 0.1, 0.0, &mut vel).unwrap();
        assert!((params.get(0) - 0.8).abs() < 1e-15);
        let before = params.clone();
        let zero = params.zeros_like();
        let mut vel = params.zeros_like();
        sgd_step(&mut params, &zero, 0.1, 0.9, &mut vel).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_momentum_matches_unrolled_recurrence() {
        let spec = single_conv_spec(1, 1);
        let mut params = NetworkParams::zeros(&spec).unwrap();
        params.set(0, 1.0);
        let mut vel = params.zeros_like();
        let (lr, m) = (0.1, 0.9);
        let (g1, g2) = (2.0, -0.5);
        for g in [g1, g2] {
            let mut grads = params.zeros_like();
            grads.set(0, g);
            sgd_step(&mut params, &grads, lr, m, &mut vel).unwrap();
        }
        let v1 = -lr * g1;
        let v2 = m * v1 - lr * g2;
        let w2 = 1.0 + v1 + v2;
        assert!((params.get(0) - w2).abs() < 1e-15);
        assert!((vel.get(0) - v2).abs() < 1e-15);
    }

    #[test]
    fn sgd_refuses_non_finite_update() {
        let spec = single_conv_spec(1, 1);
        let mut params = NetworkParams::zeros(&spec).unwrap();
        let mut grads = params.zeros_like();
        grads.set(0, f64::INFINITY);
        let mut vel = params.zeros_like();
        let before = params.clone();
        assert!(sgd_step(&mut params, &grads, 0.1, 0.9, &mut vel).is_err());
        assert_eq!(params, before);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = NetworkSpec::desk();
        let a = init_params(&spec, 42).unwrap();
        let b = init_params(&spec, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 43).unwrap());
        for p in a.layers.iter().flatten() {
            assert!(p.biases.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_variance_follows_fan_in() {
        let spec = NetworkSpec {
            input_side: 1,
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv { kernel_h: 1, kernel_w: 1, out_channels: 50 },
                LayerSpec::FullyConnected { out_channels: 200 },
                LayerSpec::Softmax,
            ],
            class_count: 2,
        };
        let params = init_params(&spec, 9).unwrap();
        let w = params.layers[1].as_ref().unwrap().weights.data();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 50.0;
        assert!((var - expected).abs() < 0.2 * expected, "var {var} vs {expected}");
    }

    #[test]
    fn params_file_round_trip_and_rejections() {
        let spec = NetworkSpec::desk();
        let params = init_params(&spec, 3).unwrap();
        let mut bytes = Vec::new();
        write_params(&params, &mut bytes).unwrap();
        assert!(bytes.starts_with(b"MRNN1\nlayers=9\nw=16x1x5x5 b=16\n"));
        let back = read_params(&bytes[..]).unwrap();
        assert_eq!(back, params);
        assert!(read_params(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_params(&bad[..]).is_err());
    }

    fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let mut out = Tensor::zeros(&[oc, oh, ow]);
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[o];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += w.at(&[o, ic, ky, kx]) * x.at(&[ic, y + ky, xo + kx]);
                            }
                        }
                    }
                    out.set(&[o, y, xo], acc);
                }
            }
        }
        out
    }

    fn pool_oracle(x: &Tensor, k: usize, s: usize) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let m = (0..k * k)
                        .map(|i| x.at(&[ch, y * s + i / k, xo * s + i % k]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.set(&[ch, y, xo], m);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops_exactly() {
        let mut rng = seed::rng(100);
        for _ in 0..200 {
            let (h, w) = (rng.gen_range(3..=16), rng.gen_range(3..=16));
            let (kh, kw) = (rng.gen_range(1..=h.min(5)), rng.gen_range(1..=w.min(5)));
            let (c, oc) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let x = random_tensor(&[c, h, w], &mut rng);
            let wt = random_tensor(&[oc, c, kh, kw], &mut rng);
            let b = random_tensor(&[oc], &mut rng);
            assert_eq!(conv_forward(&x, &wt, &b), conv_oracle(&x, &wt, &b));
        }
    }

    #[test]
    fn pool_matches_direct_loops_and_breaks_ties_first() {
        let mut rng = seed::rng(101);
        for _ in 0..200 {
            let (h, w) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
            let k = rng.gen_range(1..=h.min(w).min(3));
            let s = rng.gen_range(1..=k);
            let x = random_tensor(&[2, h, w], &mut rng);
            assert_eq!(maxpool_forward(&x, k, k, s).0, pool_oracle(&x, k, s));
        }
        let tied = Tensor::new(vec![1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(maxpool_forward(&tied, 2, 2, 2).1, vec![0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = NetworkSpec {
            input_side: 9,
            input_channels: 1,
            layers: parse_layers("conv3x3:2,relu,pool2x2/2,conv3x3:3,relu,fc:3,relu,softmax").unwrap(),
            class_count: 2,
        };
        let mut rng = seed::rng(102);
        let params = init_params(&spec, 3).unwrap();
        let ex = TrainExample { patch: random_tensor(&[1, 9, 9], &mut rng), label: 1 };
        let err = grad_check(&spec, &params, &ex, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
        assert!(grad_check(&spec, &params, &ex, 1.0).is_err());
    }

    #[test]
    fn wrong_gradients_are_caught() {
        let spec = single_conv_spec(3, 3);
        let params = init_params(&spec, 4).unwrap();
        let ex = TrainExample { patch: Tensor::filled(&[1, 3, 3], 0.3), label: 0 };
        let err = grad_check_with(&spec, &params, &ex, 1e-5, |s, p, a, l| {
            let (mut g, _) = backward(s, p, a, l)?;
            g.scale(2.0);
            Ok(g)
        })
        .unwrap();
        assert!(err > 0.1);
    }
}
