//! A small differentiable acoustic model with hand-written backpropagation.
//!
//! Data flow for one utterance:
//!
//! ```text
//! F x T x D features
//!   -> separable conv blocks (residual, strided)     F' x T' x N
//!   -> mean over frequency                           T' x N
//!   -> unidirectional GRU                            T' x hidden
//!   -> linear head                                   T' x K logits
//! ```
//!
//! Dropout, when enabled, multiplies each layer's input by a Bernoulli keep
//! mask during training and by the keep probability at inference.

mod recurrent;
mod sepconv;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use recurrent::{Gru, GruCache, Linear};
pub use sepconv::{output_len, sepconv_forward, Activation, FeatureMap, SepConvCache, SepConvGrads, SepConvLayer};

use crate::ctc::{LogitSeq, LossGrad};
use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from_seed, Rng};

/// One separable convolution block, written like `(C, F, T, SF, ST)`:
/// output channels, frequency taps, time taps, frequency stride, time stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 5]", into = "[usize; 5]")]
pub struct ConvBlockConfig {
    pub channels: usize,
    pub filter_f: usize,
    pub filter_t: usize,
    pub stride_f: usize,
    pub stride_t: usize,
}

impl From<[usize; 5]> for ConvBlockConfig {
    fn from([channels, filter_f, filter_t, stride_f, stride_t]: [usize; 5]) -> Self {
        Self {
            channels,
            filter_f,
            filter_t,
            stride_f,
            stride_t,
        }
    }
}

impl From<ConvBlockConfig> for [usize; 5] {
    fn from(c: ConvBlockConfig) -> Self {
        [c.channels, c.filter_f, c.filter_t, c.stride_f, c.stride_t]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    /// Applied to the raw input features.
    pub data: f64,
    /// Applied to the inputs of later conv blocks and of the recurrent layer.
    pub conv: f64,
    /// Applied to the input of the output head.
    pub recurrent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_freq: usize,
    pub input_channels: usize,
    /// Output classes including blank.
    pub classes: usize,
    pub conv_blocks: Vec<ConvBlockConfig>,
    pub residual: bool,
    pub activation: Activation,
    pub hidden: usize,
    pub dropout: DropoutConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_freq == 0 || self.input_channels == 0 || self.classes < 2 || self.hidden == 0 {
            return invalid("model dimensions must be positive and classes >= 2");
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.channels == 0 || b.filter_f == 0 || b.filter_t == 0 || b.stride_f == 0 || b.stride_t == 0 {
                return invalid(format!("conv block {i} has a zero dimension"));
            }
        }
        for p in [self.dropout.data, self.dropout.conv, self.dropout.recurrent] {
            if !(0.0..1.0).contains(&p) {
                return invalid(format!("dropout rate {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Frames of logits produced for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.conv_blocks
            .iter()
            .fold(frames, |t, b| output_len(t, b.stride_t))
    }
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// All trainable parameters. Also used as the container for their gradients
/// and for optimizer state of the same shapes.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub convs: Vec<SepConvLayer>,
    pub gru: Gru,
    pub head: Linear,
    generation: u64,
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

impl ModelParams {
    /// All-zero parameters with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut channels = config.input_channels;
        let mut convs = Vec::with_capacity(config.conv_blocks.len());
        for b in &config.conv_blocks {
            let identity = b.stride_f == 1 && b.stride_t == 1 && channels == b.channels;
            convs.push(SepConvLayer {
                channelwise: Array3::zeros((b.filter_f, b.filter_t, channels)),
                pointwise: Array2::zeros((channels, b.channels)),
                stride_f: b.stride_f,
                stride_t: b.stride_t,
                has_residual: config.residual,
                projection: (config.residual && !identity).then(|| Array2::zeros((channels, b.channels))),
                activation: config.activation,
            });
            channels = b.channels;
        }
        Ok(Self {
            config: config.clone(),
            convs,
            gru: Gru::zeros(channels, config.hidden),
            head: Linear::zeros(config.hidden, config.classes),
            generation: fresh_generation(),
        })
    }

    /// Conv and linear weights uniform with He fan-in scaling, recurrent
    /// weights uniform in `[-1/32, 1/32]`, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = rng_from_seed(seed);
        let he = |a: &mut [f64], fan_in: usize, rng: &mut Rng| {
            let bound = (6.0 / fan_in as f64).sqrt();
            a.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        };
        for layer in &mut p.convs {
            let (w, h, d) = layer.channelwise.dim();
            he(slice_mut(&mut layer.channelwise), w * h, &mut rng);
            he(slice_mut(&mut layer.pointwise), d, &mut rng);
            if let Some(proj) = &mut layer.projection {
                he(slice_mut(proj), d, &mut rng);
            }
        }
        let bound = 1.0 / 32.0;
        for m in [
            &mut p.gru.w_z,
            &mut p.gru.w_r,
            &mut p.gru.w_n,
            &mut p.gru.u_z,
            &mut p.gru.u_r,
            &mut p.gru.u_n,
        ] {
            m.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        let hidden = p.gru.hidden_size();
        he(slice_mut(&mut p.head.weight), hidden, &mut rng);
        p.generation = fresh_generation();
        Ok(p)
    }

    /// Zeros of the same structure.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Identifies the parameter values; changes on every mutable access.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        fn named<'a, D: ndarray::Dimension>(name: String, a: &'a ndarray::Array<f64, D>) -> NamedTensor<'a> {
            NamedTensor {
                name,
                shape: a.shape().to_vec(),
                data: slice(a),
            }
        }
        let mut out = Vec::new();
        for (i, layer) in self.convs.iter().enumerate() {
            out.push(named(format!("conv{i}.channelwise"), &layer.channelwise));
            out.push(named(format!("conv{i}.pointwise"), &layer.pointwise));
            if let Some(p) = &layer.projection {
                out.push(named(format!("conv{i}.projection"), p));
            }
        }
        let g = &self.gru;
        for (name, m) in [("w_z", &g.w_z), ("w_r", &g.w_r), ("w_n", &g.w_n), ("u_z", &g.u_z), ("u_r", &g.u_r), ("u_n", &g.u_n)] {
            out.push(named(format!("gru.{name}"), m));
        }
        for (name, b) in [("b_z", &g.b_z), ("b_r", &g.b_r), ("b_n", &g.b_n)] {
            out.push(named(format!("gru.{name}"), b));
        }
        out.push(named("head.weight".into(), &self.head.weight));
        out.push(named("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable views of every tensor, in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation = fresh_generation();
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.convs {
            out.push(slice_mut(&mut layer.channelwise));
            out.push(slice_mut(&mut layer.pointwise));
            if let Some(p) = &mut layer.projection {
                out.push(slice_mut(p));
            }
        }
        let Gru { w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n } = &mut self.gru;
        for m in [w_z, w_r, w_n, u_z, u_r, u_n] {
            out.push(slice_mut(m));
        }
        for b in [b_z, b_r, b_n] {
            out.push(slice_mut(b));
        }
        out.push(slice_mut(&mut self.head.weight));
        out.push(slice_mut(&mut self.head.bias));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Flattened copy of every parameter.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return invalid(format!(
                "expected {} values, got {}",
                self.num_parameters(),
                values.len()
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Sum of squares of every entry.
    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum()
    }

    /// `self += scale * other`; structures must match.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s.data) {
                *d += scale * v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Whether dropout is sampled (training) or replaced by its expectation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

#[derive(Clone, Debug)]
enum DropMask {
    Identity,
    Scale(f64),
    Mask(Vec<f64>),
}

impl DropMask {
    fn draw(values: &mut [f64], rate: f64, mode: Mode, rng: &mut Option<Rng>) -> Self {
        if rate == 0.0 {
            return DropMask::Identity;
        }
        match (mode, rng) {
            (Mode::Train { .. }, Some(rng)) => {
                let mask: Vec<f64> = values
                    .iter()
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 })
                    .collect();
                values.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                DropMask::Mask(mask)
            }
            _ => {
                let keep = 1.0 - rate;
                values.iter_mut().for_each(|v| *v *= keep);
                DropMask::Scale(keep)
            }
        }
    }

    fn backward(&self, grads: &mut [f64]) {
        match self {
            DropMask::Identity => {}
            DropMask::Scale(s) => grads.iter_mut().for_each(|g| *g *= s),
            DropMask::Mask(m) => grads.iter_mut().zip(m).for_each(|(g, m)| *g *= m),
        }
    }
}

/// Activations retained by [`model_forward`] for [`model_backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    conv_inputs: Vec<FeatureMap>,
    conv_caches: Vec<SepConvCache>,
    conv_masks: Vec<DropMask>,
    conv_out_dims: (usize, usize, usize),
    gru_input: Array2<f64>,
    gru_mask: DropMask,
    gru_cache: GruCache,
    head_input: Array2<f64>,
    head_mask: DropMask,
}

impl ForwardCache {
    pub fn output_frames(&self) -> usize {
        self.head_input.nrows()
    }
}

/// Runs the model on one utterance.
pub fn model_forward(input: &FeatureMap, params: &ModelParams, mode: Mode) -> Result<(LogitSeq, ForwardCache)> {
    let cfg = &params.config;
    let (f, t, d) = input.dim();
    if f != cfg.input_freq || d != cfg.input_channels {
        return invalid(format!(
            "input is {f} x {t} x {d}, model expects {} x T x {}",
            cfg.input_freq, cfg.input_channels
        ));
    }
    let mut rng = match mode {
        Mode::Train { seed } => Some(rng_from_seed(seed)),
        Mode::Eval => None,
    };

    let mut current = input.values().clone();
    let mut conv_inputs = Vec::with_capacity(params.convs.len());
    let mut conv_caches = Vec::with_capacity(params.convs.len());
    let mut conv_masks = Vec::with_capacity(params.convs.len());
    for (i, layer) in params.convs.iter().enumerate() {
        let rate = if i == 0 { cfg.dropout.data } else { cfg.dropout.conv };
        conv_masks.push(DropMask::draw(slice_mut(&mut current), rate, mode, &mut rng));
        let x = FeatureMap::from_raw(current);
        let (y, cache) = layer.forward_cached(&x)?;
        conv_inputs.push(x);
        conv_caches.push(cache);
        current = y.into_inner();
    }
    let conv_out_dims = current.dim();

    let mut gru_input = current.mean_axis(Axis(0)).expect("non-empty frequency axis");
    let gru_rate = if params.convs.is_empty() { cfg.dropout.data } else { cfg.dropout.conv };
    let gru_mask = DropMask::draw(slice_mut(&mut gru_input), gru_rate, mode, &mut rng);
    let gru_cache = params.gru.forward(&gru_input);

    let mut head_input = gru_cache.states.slice(ndarray::s![1.., ..]).to_owned();
    let head_mask = DropMask::draw(slice_mut(&mut head_input), cfg.dropout.recurrent, mode, &mut rng);
    let logits = params.head.forward(&head_input);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState("model produced non-finite logits".into()));
    }

    Ok((
        LogitSeq::new(logits)?,
        ForwardCache {
            generation: params.generation,
            conv_inputs,
            conv_caches,
            conv_masks,
            conv_out_dims,
            gru_input,
            gru_mask,
            gru_cache,
            head_input,
            head_mask,
        },
    ))
}

/// Gradients of every parameter given the loss gradient w.r.t. the logits
/// produced by the matching [`model_forward`] call.
pub fn model_backward(cache: &ForwardCache, loss_grad: &LossGrad, params: &ModelParams) -> Result<ModelParams> {
    if cache.generation != params.generation {
        return Err(Error::InvalidState(
            "forward cache was produced with different parameters".into(),
        ));
    }
    let expected = (cache.output_frames(), params.config.classes);
    if loss_grad.grad.dim() != expected {
        return Err(Error::InvalidState(format!(
            "loss gradient is {:?}, forward pass produced {:?}",
            loss_grad.grad.dim(),
            expected
        )));
    }
    let mut grads = params.zeros_like();

    let mut d_head_in = params.head.backward(&cache.head_input, &loss_grad.grad, &mut grads.head);
    cache.head_mask.backward(slice_mut(&mut d_head_in));

    let mut d_gru_in = params
        .gru
        .backward(&cache.gru_input, &cache.gru_cache, &d_head_in, &mut grads.gru);
    cache.gru_mask.backward(slice_mut(&mut d_gru_in));

    let (f_out, t_out, n) = cache.conv_out_dims;
    let inv = 1.0 / f_out as f64;
    let mut dy = Array3::from_shape_fn((f_out, t_out, n), |(_, t, c)| d_gru_in[[t, c]] * inv);
    for i in (0..params.convs.len()).rev() {
        let layer = &params.convs[i];
        let (mut dx, g) = layer.backward(&cache.conv_inputs[i], &cache.conv_caches[i], &dy)?;
        grads.convs[i].channelwise = g.channelwise;
        grads.convs[i].pointwise = g.pointwise;
        grads.convs[i].projection = g.projection;
        cache.conv_masks[i].backward(slice_mut(&mut dx));
        dy = dx;
    }
    Ok(grads)
}
