use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Layer, QuantizedModel};
use crate::error::{Error, Result};
use crate::rng;

/// One real value per weight, grouped by parametric layer.
pub type LayerValues = Vec<Vec<f64>>;

/// Samples processed sequentially per parallel task. Fixed so that
/// floating-point reduction order never depends on the thread count.
const CHUNK: usize = 8;

/// Labelled inputs quantized to 8-bit activations in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

pub type Dataset = Batch;

impl Batch {
    /// Inputs are clamped to `[0, 1]` and rounded to the 8-bit grid.
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::input(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let inputs = inputs
            .into_iter()
            .map(|x| x.into_iter().map(quantize_activation).collect())
            .collect();
        Ok(Batch { inputs, labels })
    }

    pub fn from_u8(pixels: Vec<Vec<u8>>, labels: Vec<usize>) -> Result<Self> {
        let inputs = pixels
            .into_iter()
            .map(|x| x.into_iter().map(|p| p as f64 / 255.0).collect())
            .collect();
        Batch::new(inputs, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Samples at the given positions, in order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Contiguous sub-range of samples.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        Batch {
            inputs: self.inputs[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    fn check(&self, model: &QuantizedModel) -> Result<()> {
        if self.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let want = model.input_len();
        if let Some(x) = self.inputs.iter().find(|x| x.len() != want) {
            return Err(Error::Shape {
                context: "batch input".into(),
                expected: model.input_shape().to_vec(),
                got: vec![x.len()],
            });
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= model.num_classes()) {
            return Err(Error::input(format!(
                "label {y} outside 0..{}",
                model.num_classes()
            )));
        }
        Ok(())
    }
}

fn quantize_activation(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Gaussian weight noise applied on every simulated hardware pass.
///
/// `std` is relative to each layer's largest dequantized magnitude; gradients
/// are averaged over `samples` independent noisy passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std: f64,
    pub samples: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::CLEAN
    }
}

impl NoiseSpec {
    pub const CLEAN: NoiseSpec = NoiseSpec { std: 0.0, samples: 1 };

    pub fn new(std: f64, samples: usize) -> Result<Self> {
        let spec = NoiseSpec { std, samples };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std.is_finite() && self.std >= 0.0) {
            return Err(Error::input(format!("noise std must be >= 0, got {}", self.std)));
        }
        if self.samples == 0 {
            return Err(Error::input("noise sample count must be >= 1"));
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.std == 0.0
    }
}

/// Dequantized weights of one simulated pass, perturbed by `std` relative noise.
pub fn realize_weights(model: &QuantizedModel, std: f64, seed: u64) -> LayerValues {
    let mut weights = model.dequantized();
    if std > 0.0 {
        let mut rng = rng::stream(seed, &[0x6e6f_6973]);
        for layer in &mut weights {
            let peak = layer.iter().fold(0.0f64, |m, w| m.max(w.abs()));
            if peak == 0.0 {
                continue;
            }
            let normal = Normal::new(0.0, std * peak).expect("finite std");
            for w in layer.iter_mut() {
                *w += normal.sample(&mut rng);
            }
        }
    }
    weights
}

/// Intermediate activations of one sample.
struct Trace {
    /// `acts[p]` is the input of layer `p`; the last entry holds the logits.
    acts: Vec<Vec<f64>>,
    /// Argmax positions of each max-pool layer, indexed by layer position.
    pool_argmax: Vec<Vec<u32>>,
}

fn forward_sample(model: &QuantizedModel, weights: &LayerValues, input: &[f64]) -> Trace {
    let layers = model.layers();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut pool_argmax = vec![Vec::new(); layers.len()];
    acts.push(input.to_vec());
    for (p, layer) in layers.iter().enumerate() {
        let x = &acts[p];
        let [c, h, w] = model.shape_at(p);
        let out = match layer {
            Layer::Conv2d(conv) => {
                let l = model.param_index_of(p).expect("conv is parametric");
                conv_forward(conv, &weights[l], x, h, w)
            }
            Layer::Dense(dense) => {
                let l = model.param_index_of(p).expect("dense is parametric");
                let wt = &weights[l];
                let mut out = dense.bias.clone();
                for (o, y) in out.iter_mut().enumerate() {
                    let row = &wt[o * dense.inputs..(o + 1) * dense.inputs];
                    *y += dot(row, x);
                }
                out
            }
            Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Layer::MaxPool2d { size } => {
                let (out, idx) = maxpool_forward(x, c, h, w, *size);
                pool_argmax[p] = idx;
                out
            }
            Layer::AffineNorm(norm) => {
                let plane = h * w;
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = i / plane;
                        norm.gain[ch] * v + norm.shift[ch]
                    })
                    .collect()
            }
        };
        acts.push(out);
    }
    Trace { acts, pool_argmax }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_forward(conv: &super::model::Conv2d, w: &[f64], x: &[f64], h: usize, wd: usize) -> Vec<f64> {
    let k = conv.kernel;
    let pad = conv.padding;
    let oh = h + 2 * pad - k + 1;
    let ow = wd + 2 * pad - k + 1;
    let mut out = vec![0.0; conv.out_channels * oh * ow];
    for o in 0..conv.out_channels {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(conv.bias[o]);
        for c in 0..conv.in_channels {
            let src = &x[c * h * wd..(c + 1) * h * wd];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h, oh);
                for kx in 0..k {
                    let wv = w[((o * conv.in_channels + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(kx, pad, wd, ow);
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let dst = &mut plane[y * ow + x0..y * ow + x1];
                        let row = &src[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output coordinates `[lo, hi)` whose input tap `out + k - pad` is in bounds.
fn valid_range(k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

fn maxpool_forward(x: &[f64], c: usize, h: usize, w: usize, s: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / s, w / s);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for dy in 0..s {
                    for dx in 0..s {
                        let i = ch * h * w + (y * s + dy) * w + xo * s + dx;
                        if x[i] > best {
                            best = x[i];
                            arg = i;
                        }
                    }
                }
                out.push(best);
                idx.push(arg as u32);
            }
        }
    }
    (out, idx)
}

/// Gradients of every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGradients {
    pub weights: LayerValues,
    pub biases: LayerValues,
    /// Gain and shift gradients per norm layer, keyed by layer position.
    pub norms: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl FullGradients {
    fn zeros(model: &QuantizedModel, with_extras: bool) -> Self {
        let weights = model.layer_sizes().into_iter().map(|n| vec![0.0; n]).collect();
        let (biases, norms) = if with_extras {
            let biases = (0..model.num_param_layers())
                .map(|l| vec![0.0; model.layers()[model.param_position(l)].bias().map_or(0, |b| b.len())])
                .collect();
            let norms = model
                .layers()
                .iter()
                .enumerate()
                .filter_map(|(p, layer)| match layer {
                    Layer::AffineNorm(n) => Some((p, vec![0.0; n.gain.len()], vec![0.0; n.gain.len()])),
                    _ => None,
                })
                .collect();
            (biases, norms)
        } else {
            (Vec::new(), Vec::new())
        };
        FullGradients { weights, biases, norms }
    }

    fn add(&mut self, other: &FullGradients) {
        add_into(&mut self.weights, &other.weights);
        add_into(&mut self.biases, &other.biases);
        for (a, b) in self.norms.iter_mut().zip(&other.norms) {
            add_slice(&mut a.1, &b.1);
            add_slice(&mut a.2, &b.2);
        }
    }

    fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= factor);
        }
        for (_, g, s) in &mut self.norms {
            g.iter_mut().chain(s.iter_mut()).for_each(|x| *x *= factor);
        }
    }
}

fn add_slice(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn add_into(a: &mut LayerValues, b: &LayerValues) {
    for (x, y) in a.iter_mut().zip(b) {
        add_slice(x, y);
    }
}

/// Backpropagate `grad_out` (gradient w.r.t. the logits) through one sample,
/// accumulating into `grads`.
fn backward_sample(
    model: &QuantizedModel,
    weights: &LayerValues,
    trace: &Trace,
    grad_out: Vec<f64>,
    grads: &mut FullGradients,
) {
    let layers = model.layers();
    let extras = !grads.biases.is_empty();
    let first_param = model.param_position(0);
    let mut delta = grad_out;
    let mut norm_slot = grads.norms.len();
    for p in (0..layers.len()).rev() {
        let x = &trace.acts[p];
        let [c, h, w] = model.shape_at(p);
        let need_input_grad = p > first_param;
        delta = match &layers[p] {
            Layer::Conv2d(conv) => {
                let l = model.param_index_of(p).expect("parametric");
                if extras {
                    let plane = delta.len() / conv.out_channels;
                    for (o, b) in grads.biases[l].iter_mut().enumerate() {
                        *b += delta[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                }
                conv_backward(conv, &weights[l], x, h, w, &delta, &mut grads.weights[l], need_input_grad)
            }
            Layer::Dense(dense) => {
                let l = model.param_index_of(p).expect("parametric");
                if extras {
                    add_slice(&mut grads.biases[l], &delta);
                }
                let gw = &mut grads.weights[l];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * dense.inputs..(o + 1) * dense.inputs];
                    for (g, &xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
                if need_input_grad {
                    let wt = &weights[l];
                    let mut din = vec![0.0; dense.inputs];
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = &wt[o * dense.inputs..(o + 1) * dense.inputs];
                        for (g, &wv) in din.iter_mut().zip(row) {
                            *g += d * wv;
                        }
                    }
                    din
                } else {
                    Vec::new()
                }
            }
            Layer::Relu => {
                if !need_input_grad {
                    Vec::new()
                } else {
                    delta
                        .iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect()
                }
            }
            Layer::MaxPool2d { .. } => {
                if !need_input_grad {
                    Vec::new()
                } else {
                    let mut din = vec![0.0; c * h * w];
                    for (&i, &d) in trace.pool_argmax[p].iter().zip(&delta) {
                        din[i as usize] += d;
                    }
                    din
                }
            }
            Layer::AffineNorm(norm) => {
                let plane = h * w;
                if extras {
                    norm_slot -= 1;
                    let (_, gg, gs) = &mut grads.norms[norm_slot];
                    for (i, &d) in delta.iter().enumerate() {
                        gg[i / plane] += d * x[i];
                        gs[i / plane] += d;
                    }
                }
                if !need_input_grad {
                    Vec::new()
                } else {
                    delta
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| d * norm.gain[i / plane])
                        .collect()
                }
            }
        };
        if p <= first_param {
            break;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    conv: &super::model::Conv2d,
    w: &[f64],
    x: &[f64],
    h: usize,
    wd: usize,
    delta: &[f64],
    gw: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let k = conv.kernel;
    let pad = conv.padding;
    let oh = h + 2 * pad - k + 1;
    let ow = wd + 2 * pad - k + 1;
    let mut din = if need_input_grad {
        vec![0.0; conv.in_channels * h * wd]
    } else {
        Vec::new()
    };
    for o in 0..conv.out_channels {
        let dplane = &delta[o * oh * ow..(o + 1) * oh * ow];
        if dplane.iter().all(|&d| d == 0.0) {
            continue;
        }
        for c in 0..conv.in_channels {
            let src = &x[c * h * wd..(c + 1) * h * wd];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h, oh);
                for kx in 0..k {
                    let wi = ((o * conv.in_channels + c) * k + ky) * k + kx;
                    let (x0, x1) = valid_range(kx, pad, wd, ow);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let drow = &dplane[y * ow + x0..y * ow + x1];
                        let srow = &src[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                        acc += dot(drow, srow);
                    }
                    gw[wi] += acc;
                    if need_input_grad {
                        let wv = w[wi];
                        if wv == 0.0 {
                            continue;
                        }
                        let dst = &mut din[c * h * wd..(c + 1) * h * wd];
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            let drow = &dplane[y * ow + x0..y * ow + x1];
                            let irow = &mut dst[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                            for (g, &d) in irow.iter_mut().zip(drow) {
                                *g += wv * d;
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Locate the first layer with a non-finite output for error reporting.
fn numeric_error(model: &QuantizedModel, weights: &LayerValues, input: &[f64]) -> Error {
    let trace = forward_sample(model, weights, input);
    let layer = trace
        .acts
        .iter()
        .skip(1)
        .position(|a| a.iter().any(|v| !v.is_finite()))
        .unwrap_or(model.layers().len() - 1);
    Error::Numeric {
        layer,
        kind: model.layers()[layer].name(),
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect()
}

/// Logits and mean loss of `batch` under explicit real-valued weights.
pub fn forward_with(
    model: &QuantizedModel,
    weights: &LayerValues,
    batch: &Batch,
) -> Result<(Vec<Vec<f64>>, f64)> {
    batch.check(model)?;
    let parts: Vec<(Vec<Vec<f64>>, f64)> = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|range| {
            let mut logits = Vec::with_capacity(range.len());
            let mut loss = 0.0;
            for i in range {
                let mut trace = forward_sample(model, weights, batch.input(i));
                let z = trace.acts.pop().expect("logits");
                loss += cross_entropy(&z, batch.label(i));
                logits.push(z);
            }
            (logits, loss)
        })
        .collect();
    let mut logits = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for (z, l) in parts {
        logits.extend(z);
        loss += l;
    }
    let loss = loss / batch.len() as f64;
    if !loss.is_finite() {
        return Err(numeric_error(model, weights, batch.input(0)));
    }
    Ok((logits, loss))
}

/// Mean loss and its gradient under explicit real-valued weights.
pub fn loss_and_grad_with(
    model: &QuantizedModel,
    weights: &LayerValues,
    batch: &Batch,
    with_extras: bool,
) -> Result<(f64, FullGradients)> {
    batch.check(model)?;
    let n = batch.len() as f64;
    let parts: Vec<(f64, FullGradients)> = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|range| {
            let mut grads = FullGradients::zeros(model, with_extras);
            let mut loss = 0.0;
            for i in range {
                let trace = forward_sample(model, weights, batch.input(i));
                let z = trace.acts.last().expect("logits");
                let y = batch.label(i);
                loss += cross_entropy(z, y);
                let mut g = softmax(z);
                g[y] -= 1.0;
                g.iter_mut().for_each(|v| *v /= n);
                backward_sample(model, weights, &trace, g, &mut grads);
            }
            (loss, grads)
        })
        .collect();
    let mut total = FullGradients::zeros(model, with_extras);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add(g);
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(numeric_error(model, weights, batch.input(0)));
    }
    Ok((loss, total))
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
    pub loss: f64,
}

/// Logits and mean softmax cross-entropy, with one noise realization drawn
/// from `seed`.
pub fn forward(model: &QuantizedModel, batch: &Batch, noise: NoiseSpec, seed: u64) -> Result<ForwardOutput> {
    noise.validate()?;
    let weights = realize_weights(model, noise.std, seed);
    let (logits, loss) = forward_with(model, &weights, batch)?;
    Ok(ForwardOutput { logits, loss })
}

/// Gradient of the mean loss w.r.t. each dequantized weight, averaged over
/// `noise.samples` independent noisy passes.
pub fn backward(model: &QuantizedModel, batch: &Batch, noise: NoiseSpec, seed: u64) -> Result<LayerValues> {
    backward_with_loss(model, batch, noise, seed).map(|(_, g)| g)
}

pub(crate) fn backward_with_loss(
    model: &QuantizedModel,
    batch: &Batch,
    noise: NoiseSpec,
    seed: u64,
) -> Result<(f64, LayerValues)> {
    noise.validate()?;
    let passes = if noise.is_clean() { 1 } else { noise.samples };
    let mut total: Option<FullGradients> = None;
    let mut loss = 0.0;
    for s in 0..passes {
        let weights = realize_weights(model, noise.std, rng::derive(seed, &[s as u64]));
        let (l, g) = loss_and_grad_with(model, &weights, batch, false)?;
        loss += l;
        match &mut total {
            Some(t) => t.add(&g),
            None => total = Some(g),
        }
    }
    let mut total = total.expect("at least one pass");
    if passes > 1 {
        total.scale(1.0 / passes as f64);
    }
    Ok((loss / passes as f64, total.weights))
}

/// Diagonal of the Gauss-Newton matrix of the mean loss.
///
/// For softmax cross-entropy the output Hessian is `diag(p) - p pᵀ`
/// `= Σ_c p_c (e_c - p)(e_c - p)ᵀ`, so the diagonal is a sum of squared
/// backpropagated vectors `sqrt(p_c)(e_c - p)`. Always non-negative; for
/// networks that are piecewise linear in every single weight (conv, dense,
/// ReLU, max-pool, affine) it equals the exact Hessian diagonal.
pub fn curvature_diag(model: &QuantizedModel, batch: &Batch) -> Result<LayerValues> {
    batch.check(model)?;
    let weights = model.dequantized();
    let n = batch.len() as f64;
    let classes = model.num_classes();
    let parts: Vec<LayerValues> = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|range| {
            let mut acc: LayerValues = model.layer_sizes().into_iter().map(|s| vec![0.0; s]).collect();
            let mut scratch = FullGradients::zeros(model, false);
            for i in range {
                let trace = forward_sample(model, &weights, batch.input(i));
                let p = softmax(trace.acts.last().expect("logits"));
                for c in 0..classes {
                    if p[c] < 1e-300 {
                        continue;
                    }
                    let root = p[c].sqrt();
                    let v: Vec<f64> = (0..classes)
                        .map(|k| root * (if k == c { 1.0 } else { 0.0 } - p[k]))
                        .collect();
                    scratch.weights.iter_mut().for_each(|g| g.fill(0.0));
                    backward_sample(model, &weights, &trace, v, &mut scratch);
                    for (a, g) in acc.iter_mut().zip(&scratch.weights) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += y * y;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut h: LayerValues = model.layer_sizes().into_iter().map(|s| vec![0.0; s]).collect();
    for part in &parts {
        add_into(&mut h, part);
    }
    for layer in &mut h {
        layer.iter_mut().for_each(|v| *v /= n);
    }
    Ok(h)
}

/// Predicted class of every sample under explicit weights.
pub fn predict_with(model: &QuantizedModel, weights: &LayerValues, batch: &Batch) -> Result<Vec<usize>> {
    batch.check(model)?;
    let parts: Vec<Vec<usize>> = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|range| {
            range
                .map(|i| {
                    let trace = forward_sample(model, weights, batch.input(i));
                    argmax(trace.acts.last().expect("logits"))
                })
                .collect()
        })
        .collect();
    Ok(parts.into_iter().flatten().collect())
}

pub fn accuracy_with(model: &QuantizedModel, weights: &LayerValues, dataset: &Dataset) -> Result<f64> {
    let preds = predict_with(model, weights, dataset)?;
    let correct = preds
        .iter()
        .zip(dataset.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of argmax-correct predictions under one noise realization.
pub fn evaluate(model: &QuantizedModel, dataset: &Dataset, noise: NoiseSpec, seed: u64) -> Result<f64> {
    noise.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let weights = realize_weights(model, noise.std, seed);
    accuracy_with(model, &weights, dataset)
}
