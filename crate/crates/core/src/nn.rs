//! Feed-forward dense networks with hand-written backpropagation.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation value.
    fn derivative(self, pre: f32) -> f32 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(pre);
                s * (1.0 - s)
            }
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where the upstream gradient handed to [`Network::backward`] is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradAt {
    /// Gradient with respect to the network output (after the final activation).
    Output,
    /// Gradient with respect to the final layer's pre-activation, e.g. logits
    /// of a sigmoid or softmax output when the loss is folded into it.
    PreActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `[in × out]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    /// Fan-in scaled uniform initialisation.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let gain = if activation == Activation::Relu { 6.0 } else { 3.0 };
        let limit = (gain / inputs as f32).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Self {
            weights: Tensor::new(vec![inputs, outputs], data).expect("consistent shape"),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `input · W + b`, then the activation. Returns `(pre, post)`.
    fn apply(&self, input: &Tensor) -> (Tensor, Tensor) {
        let n = input.rows();
        let (i, o) = (self.inputs(), self.outputs());
        let mut pre = Tensor::zeros(&[n, o]);
        for r in 0..n {
            pre.row_mut(r).copy_from_slice(self.bias.data());
        }
        gemm(n, i, o, input.data(), false, self.weights.data(), false, pre.data_mut(), 1.0);
        let post = pre.map(|v| self.activation.apply(v));
        (pre, post)
    }
}

/// Per-layer record of a forward pass, consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    start: usize,
    pub input: Tensor,
    /// Pre-activation of each layer run.
    pub pre: Vec<Tensor>,
    /// Output of each layer run (after activation and, in training, dropout).
    pub post: Vec<Tensor>,
    masks: Vec<Option<Vec<f32>>>,
}

impl ForwardCache {
    /// Index of the first layer this cache covers.
    pub fn start_layer(&self) -> usize {
        self.start
    }

    pub fn output(&self) -> &Tensor {
        self.post.last().unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// One entry per layer of the network (layers not covered by the cache
    /// carry zero gradients).
    pub layers: Vec<LayerGrad>,
    /// Gradient with respect to the cache input.
    pub input: Tensor,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Tensor::zeros(l.weights.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
            input: Tensor::zeros(&[0]),
        }
    }

    /// Flat list in the same order as [`Network::params_mut`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|g| [&g.weights, &g.bias])
            .collect()
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.layers {
            g.weights.data_mut().iter_mut().for_each(|v| *v *= factor);
            g.bias.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
    pub dropout_rate: f32,
    version: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.dropout_rate == other.dropout_rate
    }
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>, dropout_rate: f32) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        for (idx, l) in layers.iter().enumerate() {
            if l.weights.shape().len() != 2 || l.bias.shape() != [l.outputs()] {
                return Err(Error::Shape(format!(
                    "layer {idx}: weights {:?}, bias {:?}",
                    l.weights.shape(),
                    l.bias.shape()
                )));
            }
        }
        for (idx, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {idx} outputs {} but layer {} takes {}",
                    pair[0].outputs(),
                    idx + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self {
            layers,
            dropout_rate,
            version: fresh_version(),
        })
    }

    /// Randomly initialised network with the given widths. `hidden` is used
    /// for every layer but the last, which uses `output`.
    pub fn with_widths(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        dropout_rate: f32,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument("need at least two widths".into()));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self::new(layers, dropout_rate)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(|l| l.outputs()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in a fixed order: `w0, b0, w1, b1, ...`. Taking them mutably
    /// invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.version = fresh_version();
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, ForwardCache)> {
        self.forward_range(0..self.layers.len(), input, mode, rng)
    }

    /// Run layers `range` only; the input must match the first of them.
    pub fn forward_range(
        &self,
        range: Range<usize>,
        input: &Tensor,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor, ForwardCache)> {
        if range.start >= range.end || range.end > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer range {range:?} for a {}-layer network",
                self.layers.len()
            )));
        }
        let first = &self.layers[range.start];
        if input.cols() != first.inputs() {
            return Err(Error::Shape(format!(
                "input width {} but layer {} takes {}",
                input.cols(),
                range.start,
                first.inputs()
            )));
        }
        input.ensure_finite("network input")?;
        let last_layer = self.layers.len() - 1;
        let mut cache = ForwardCache {
            version: self.version,
            start: range.start,
            input: input.clone(),
            pre: Vec::with_capacity(range.len()),
            post: Vec::with_capacity(range.len()),
            masks: Vec::with_capacity(range.len()),
        };
        for idx in range {
            let layer = &self.layers[idx];
            let current = cache.post.last().unwrap_or(&cache.input);
            let (pre, mut post) = layer.apply(current);
            let mut mask = None;
            if mode == Mode::Train && idx != last_layer && self.dropout_rate > 0.0 {
                let keep = 1.0 - self.dropout_rate;
                let scale = 1.0 / keep;
                let m: Vec<f32> = (0..post.len())
                    .map(|_| if rng.uniform() < keep { scale } else { 0.0 })
                    .collect();
                post.data_mut().iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                mask = Some(m);
            }
            cache.pre.push(pre);
            cache.post.push(post);
            cache.masks.push(mask);
        }
        let out = cache.output().clone();
        Ok((out, cache))
    }

    /// Deterministic inference without keeping a cache.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        self.eval_range(0..self.layers.len(), input)
    }

    pub fn eval_range(&self, range: Range<usize>, input: &Tensor) -> Result<Tensor> {
        if range.start >= range.end || range.end > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer range {range:?} for a {}-layer network",
                self.layers.len()
            )));
        }
        if input.cols() != self.layers[range.start].inputs() {
            return Err(Error::Shape(format!(
                "input width {} but layer {} takes {}",
                input.cols(),
                range.start,
                self.layers[range.start].inputs()
            )));
        }
        input.ensure_finite("network input")?;
        let mut current = input.clone();
        for idx in range {
            current = self.layers[idx].apply(&current).1;
        }
        Ok(current)
    }

    /// Pre-activation of the final layer (e.g. logits of a sigmoid output).
    pub fn eval_logits(&self, input: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let hidden = if last == 0 {
            input.clone()
        } else {
            self.eval_range(0..last, input)?
        };
        if hidden.cols() != self.layers[last].inputs() {
            return Err(Error::Shape(format!(
                "input width {} but layer {last} takes {}",
                hidden.cols(),
                self.layers[last].inputs()
            )));
        }
        Ok(self.layers[last].apply(&hidden).0)
    }

    fn check_cache(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        let end = cache.start + cache.pre.len();
        if end > self.layers.len() {
            return Err(Error::StaleCache);
        }
        let out = cache.output();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        Ok(())
    }

    /// Backpropagate `upstream` through the layers covered by `cache`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor, at: GradAt) -> Result<Gradients> {
        self.backprop(cache, upstream, at, true)
    }

    /// Like [`Network::backward`] but only the gradient with respect to the
    /// input is formed.
    pub fn backward_input(&self, cache: &ForwardCache, upstream: &Tensor, at: GradAt) -> Result<Tensor> {
        Ok(self.backprop(cache, upstream, at, false)?.input)
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor,
        at: GradAt,
        param_grads: bool,
    ) -> Result<Gradients> {
        self.check_cache(cache, upstream)?;
        let mut grads = if param_grads {
            Gradients::zeros_like(self)
        } else {
            Gradients {
                layers: Vec::new(),
                input: Tensor::zeros(&[0]),
            }
        };
        let count = cache.pre.len();
        let n = upstream.rows();
        let mut g = upstream.clone();
        for pos in (0..count).rev() {
            let idx = cache.start + pos;
            let layer = &self.layers[idx];
            let skip_activation = pos + 1 == count && at == GradAt::PreActivation;
            if !skip_activation {
                if let Some(mask) = &cache.masks[pos] {
                    g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                }
                let act = layer.activation;
                if act != Activation::Identity {
                    g.data_mut()
                        .iter_mut()
                        .zip(cache.pre[pos].data())
                        .for_each(|(v, &p)| *v *= act.derivative(p));
                }
            }
            let layer_in = if pos == 0 { &cache.input } else { &cache.post[pos - 1] };
            let (i, o) = (layer.inputs(), layer.outputs());
            if param_grads {
                let lg = &mut grads.layers[idx];
                gemm(i, n, o, layer_in.data(), true, g.data(), false, lg.weights.data_mut(), 0.0);
                let db = lg.bias.data_mut();
                for r in 0..n {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
            }
            let mut gin = Tensor::zeros(&[n, i]);
            gemm(n, o, i, g.data(), false, layer.weights.data(), true, gin.data_mut(), 0.0);
            g = gin;
        }
        grads.input = g;
        Ok(grads)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}
