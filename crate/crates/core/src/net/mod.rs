//! Network construction, forward inference, and reverse-mode backward passes.
//!
//! A [`Network`] is an ordered list of [`LayerSpec`]s plus parameters. One
//! forward pass yields logits and a [`Tape`]; the tape is consumed by exactly
//! one backward pass, which can produce parameter gradients, the gradient
//! with respect to the input (standard or guided ReLU rule), and the
//! activation/gradient pair at one captured feature layer.

mod arch;
pub(crate) mod ops;

use serde::{Deserialize, Serialize};

pub use arch::{Arch, ArchOptions, ARCH_NAMES};

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use ops::BnCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// 3×3 convolution with padding 1.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        bias: bool,
    },
    Relu,
    MaxPool2,
    BatchNorm { channels: usize },
    GlobalAvgPool,
    Dropout { rate: f32 },
    /// conv-bn-relu-conv-bn plus identity shortcut, then relu.
    Residual {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    /// Per-sample output shape, or a dimension error if `input` does not fit.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || dim_err(format!("{self:?} cannot take per-sample input {input:?}"));
        Ok(match self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(bad());
                }
                vec![*outputs]
            }
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                stride,
                ..
            }
            | LayerSpec::Residual {
                in_channels,
                out_channels,
                stride,
            } => match input {
                [c, h, w] if c == in_channels && *stride > 0 => {
                    vec![*out_channels, (h - 1) / stride + 1, (w - 1) / stride + 1]
                }
                _ => return Err(bad()),
            },
            LayerSpec::Relu => input.to_vec(),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Configuration(format!("dropout rate {rate} outside [0, 1)")));
                }
                input.to_vec()
            }
            LayerSpec::MaxPool2 => match input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => vec![*c, h / 2, w / 2],
                _ => return Err(bad()),
            },
            LayerSpec::BatchNorm { channels } => {
                if input.first() != Some(channels) || !(input.len() == 1 || input.len() == 3) {
                    return Err(bad());
                }
                input.to_vec()
            }
            LayerSpec::GlobalAvgPool => match input {
                [c, _, _] => vec![*c],
                _ => return Err(bad()),
            },
            LayerSpec::Flatten => vec![input.iter().product()],
        })
    }

    /// Number of weighted (conv or dense) layers, counting residual internals.
    pub fn weighted_layers(&self) -> usize {
        match self {
            LayerSpec::Dense { .. } | LayerSpec::Conv3x3 { .. } => 1,
            LayerSpec::Residual { .. } => 2,
            _ => 0,
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_channels, in_channels, 3, 3]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            LayerSpec::BatchNorm { channels } => vec![vec![channels], vec![channels]],
            LayerSpec::Residual {
                in_channels,
                out_channels,
                ..
            } => vec![
                vec![out_channels, in_channels, 3, 3],
                vec![out_channels],
                vec![out_channels],
                vec![out_channels, out_channels, 3, 3],
                vec![out_channels],
                vec![out_channels],
            ],
            _ => Vec::new(),
        }
    }

    fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::BatchNorm { channels } => vec![vec![channels]; 2],
            LayerSpec::Residual { out_channels, .. } => vec![vec![out_channels]; 4],
            _ => Vec::new(),
        }
    }

    fn init_params<T: Scalar>(&self, rng: &mut Rng) -> Vec<Tensor<T>> {
        let he = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.normal() * std))
        };
        match *self {
            LayerSpec::Dense { inputs, .. } => {
                let shapes = self.param_shapes();
                vec![he(&shapes[0], inputs, rng), Tensor::zeros(shapes[1].clone())]
            }
            LayerSpec::Conv3x3 { in_channels, .. } => {
                let shapes = self.param_shapes();
                let mut v = vec![he(&shapes[0], in_channels * 9, rng)];
                v.extend(shapes[1..].iter().map(|s| Tensor::zeros(s.clone())));
                v
            }
            LayerSpec::BatchNorm { channels } => {
                vec![Tensor::full(vec![channels], T::one()), Tensor::zeros(vec![channels])]
            }
            LayerSpec::Residual {
                in_channels,
                out_channels,
                ..
            } => {
                let shapes = self.param_shapes();
                let w1 = he(&shapes[0], in_channels * 9, rng);
                let w2 = he(&shapes[3], out_channels * 9, rng);
                let ones = || Tensor::full(vec![out_channels], T::one());
                let zeros = || Tensor::zeros(vec![out_channels]);
                vec![w1, ones(), zeros(), w2, ones(), zeros()]
            }
            _ => Vec::new(),
        }
    }

    fn init_buffers<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.buffer_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                // running mean, running var, (mean, var)
                if i % 2 == 0 {
                    Tensor::zeros(s)
                } else {
                    Tensor::full(s, T::one())
                }
            })
            .collect()
    }

    /// Output is a `C×H×W` feature map (usable for Grad-CAM).
    fn is_feature_producer(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv3x3 { .. } | LayerSpec::Relu | LayerSpec::BatchNorm { .. } | LayerSpec::Residual { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReluMode {
    /// Exact gradient: pass where the forward activation was positive.
    Standard,
    /// Guided backpropagation: additionally drop negative upstream gradients.
    Guided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Options for one forward pass.
#[derive(Debug, Default)]
pub struct ForwardOpts<'a> {
    /// Normalize with batch statistics instead of running statistics.
    pub batch_stats: bool,
    /// Dropout randomness; `None` disables dropout.
    pub dropout: Option<&'a mut Rng>,
    /// Keep the output activation of this layer for [`Network::feature_grads`].
    pub capture: Option<usize>,
}

impl<'a> ForwardOpts<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        Self {
            batch_stats: true,
            dropout: Some(rng),
            capture: None,
        }
    }

    pub fn capture(mut self, layer: usize) -> Self {
        self.capture = Some(layer);
        self
    }
}

enum Cache<T: Scalar> {
    Dense { input: Tensor<T> },
    Conv { input: Tensor<T> },
    Relu { output: Tensor<T> },
    MaxPool { input_shape: Vec<usize>, idx: Vec<u32> },
    BatchNorm(BnCache<T>),
    Gap { input_shape: Vec<usize> },
    Dropout { mask: Option<Vec<T>> },
    Residual(Box<ResidualCache<T>>),
    Flatten { input_shape: Vec<usize> },
}

struct ResidualCache<T: Scalar> {
    input: Tensor<T>,
    bn1: BnCache<T>,
    mid: Tensor<T>,
    bn2: BnCache<T>,
    output: Tensor<T>,
}

/// Intermediate values from one forward pass, valid for one backward pass
/// over the same parameter version.
pub struct Tape<T: Scalar = f32> {
    version: u64,
    batch: usize,
    caches: Vec<Cache<T>>,
    captured: Option<(usize, Tensor<T>)>,
}

impl<T: Scalar> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Hash of every ReLU on/off decision and max-pool winner in the pass.
    /// Two passes with equal signatures lie on the same linear piece.
    pub fn activation_signature(&self) -> u64 {
        fn mix(h: u64, v: u64) -> u64 {
            (h ^ v).wrapping_mul(0x100_0000_01b3)
        }
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let relu = |h: &mut u64, t: &Tensor<T>| {
            for (i, v) in t.data().iter().enumerate() {
                if *v > T::zero() {
                    *h = mix(*h, i as u64);
                }
            }
            *h = mix(*h, u64::MAX);
        };
        for c in &self.caches {
            match c {
                Cache::Relu { output } => relu(&mut h, output),
                Cache::Residual(r) => {
                    relu(&mut h, &r.mid);
                    relu(&mut h, &r.output);
                }
                Cache::MaxPool { idx, .. } => {
                    for &i in idx {
                        h = mix(h, i as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardRequest {
    pub params: bool,
    pub input: bool,
    pub relu_mode: ReluMode,
    /// Record the gradient arriving at the captured feature layer.
    pub feature: bool,
    /// Record `(forward output, propagated gradient)` at every ReLU.
    pub relu_taps: bool,
}

impl BackwardRequest {
    pub fn params() -> Self {
        Self {
            params: true,
            input: false,
            relu_mode: ReluMode::Standard,
            feature: false,
            relu_taps: false,
        }
    }

    pub fn input(mode: ReluMode) -> Self {
        Self {
            params: false,
            input: true,
            relu_mode: mode,
            feature: false,
            relu_taps: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureGrads<T: Scalar = f32> {
    pub layer: usize,
    /// Forward activations `A` of the layer, `[B, K, h, w]`.
    pub activations: Tensor<T>,
    /// Gradient of the selected logits with respect to `A`.
    pub grads: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ReluTap<T: Scalar = f32> {
    pub forward_output: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    /// Flattened in [`Network::params`] order.
    pub params: Option<Vec<Tensor<T>>>,
    pub input: Option<Tensor<T>>,
    pub feature: Option<FeatureGrads<T>>,
    pub relu_taps: Vec<ReluTap<T>>,
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    arch: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor<T>>>,
    buffers: Vec<Vec<Tensor<T>>>,
    version: u64,
}

/// Momentum of the running batchnorm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

impl<T: Scalar> Network<T> {
    /// Builds a named architecture with freshly initialized parameters.
    pub fn build(arch: &str, input_shape: &[usize], num_classes: usize, rng: &mut Rng) -> Result<Self> {
        Self::build_with(arch, input_shape, num_classes, &ArchOptions::default(), rng)
    }

    pub fn build_with(
        arch: &str,
        input_shape: &[usize],
        num_classes: usize,
        opts: &ArchOptions,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Configuration("num-classes must be positive".into()));
        }
        let parsed: Arch = arch.parse()?;
        let layers = parsed.layers(input_shape, num_classes, opts)?;
        Self::from_layers(&parsed.to_string(), input_shape, num_classes, layers, rng)
    }

    /// Assembles a network from explicit layers, initializing parameters.
    pub fn from_layers(
        arch: &str,
        input_shape: &[usize],
        num_classes: usize,
        layers: Vec<LayerSpec>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let params = layers.iter().map(|l| l.init_params(rng)).collect();
        let buffers = layers.iter().map(|l| l.init_buffers()).collect();
        Self::from_parts(arch, input_shape, num_classes, layers, params, buffers)
    }

    pub fn from_parts(
        arch: &str,
        input_shape: &[usize],
        num_classes: usize,
        layers: Vec<LayerSpec>,
        params: Vec<Vec<Tensor<T>>>,
        buffers: Vec<Vec<Tensor<T>>>,
    ) -> Result<Self> {
        let net = Self {
            arch: arch.to_string(),
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            params,
            buffers,
            version: 0,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let shapes = self.layer_output_shapes()?;
        if shapes.last().map(|s| s.as_slice()) != Some(&[self.num_classes][..]) {
            return Err(Error::Configuration(format!(
                "network output {:?} does not match {} classes",
                shapes.last(),
                self.num_classes
            )));
        }
        if self.params.len() != self.layers.len() || self.buffers.len() != self.layers.len() {
            return Err(dim_err("parameter groups do not match layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let want = l.param_shapes();
            let got: Vec<&[usize]> = self.params[i].iter().map(|t| t.shape()).collect();
            let bufs: Vec<&[usize]> = self.buffers[i].iter().map(|t| t.shape()).collect();
            if want.iter().map(|s| s.as_slice()).ne(got.iter().copied())
                || l.buffer_shapes().iter().map(|s| s.as_slice()).ne(bufs.iter().copied())
            {
                return Err(dim_err(format!("layer {i} ({l:?}) parameter shapes {got:?}")));
            }
        }
        Ok(())
    }

    /// Per-sample output shape of every layer.
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::weighted_layers).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.iter().flatten()
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.version += 1;
        self.params.iter_mut().flatten()
    }

    pub fn param_groups(&self) -> &[Vec<Tensor<T>>] {
        &self.params
    }

    pub fn buffer_groups(&self) -> &[Vec<Tensor<T>>] {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |g: &Vec<Vec<Tensor<T>>>| g.iter().map(|v| v.iter().map(Tensor::cast).collect()).collect();
        Network {
            arch: self.arch.clone(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            layers: self.layers.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            version: 0,
        }
    }

    pub fn is_convolutional(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Conv3x3 { .. } | LayerSpec::Residual { .. }))
    }

    /// Layers whose output is a spatial feature map suitable for Grad-CAM.
    pub fn feature_layers(&self) -> Vec<usize> {
        let shapes = self.layer_output_shapes().unwrap_or_default();
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| l.is_feature_producer() && shapes.get(*i).is_some_and(|s| s.len() == 3))
            .map(|(i, _)| i)
            .collect()
    }

    /// The last convolutional feature map (post-activation when one follows).
    pub fn default_feature_layer(&self) -> Result<usize> {
        self.feature_layers()
            .last()
            .copied()
            .ok_or_else(|| Error::Configuration(format!("{} has no convolutional feature layer", self.arch)))
    }

    pub fn check_feature_layer(&self, layer: usize) -> Result<()> {
        if self.feature_layers().contains(&layer) {
            Ok(())
        } else {
            Err(Error::Configuration(format!(
                "layer {layer} of {} is not a spatial feature layer (candidates {:?})",
                self.arch,
                self.feature_layers()
            )))
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(dim_err(format!(
                "batch {:?} does not match network input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass. Never mutates the network; see [`Network::forward_train`].
    pub fn forward(&self, x: &Tensor<T>, mut opts: ForwardOpts<'_>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        if let Some(layer) = opts.capture {
            self.check_feature_layer(layer)?;
        }
        let batch = x.batch();
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut captured = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let p = &self.params[i];
            let (next, cache) = match *layer {
                LayerSpec::Dense { .. } => (ops::dense_forward(&h, &p[0], &p[1]), Cache::Dense { input: h }),
                LayerSpec::Conv3x3 { stride, .. } => {
                    let y = ops::conv_forward(&h, &p[0], p.get(1), stride)?;
                    (y, Cache::Conv { input: h })
                }
                LayerSpec::Relu => {
                    let y = ops::relu_forward(&h);
                    (y.clone(), Cache::Relu { output: y })
                }
                LayerSpec::MaxPool2 => {
                    let (y, idx) = ops::maxpool_forward(&h);
                    (
                        y,
                        Cache::MaxPool {
                            input_shape: h.shape().to_vec(),
                            idx,
                        },
                    )
                }
                LayerSpec::BatchNorm { .. } => {
                    let b = &self.buffers[i];
                    let (y, c) = ops::bn_forward(&h, &p[0], &p[1], &b[0], &b[1], opts.batch_stats);
                    (y, Cache::BatchNorm(c))
                }
                LayerSpec::GlobalAvgPool => (
                    ops::gap_forward(&h),
                    Cache::Gap {
                        input_shape: h.shape().to_vec(),
                    },
                ),
                LayerSpec::Dropout { rate } => match opts.dropout.as_deref_mut() {
                    Some(rng) if rate > 0.0 => {
                        let keep = T::lit(1.0 / (1.0 - rate as f64));
                        let mask: Vec<T> = (0..h.len())
                            .map(|_| if rng.bernoulli(rate as f64) { T::zero() } else { keep })
                            .collect();
                        for (v, &m) in h.data_mut().iter_mut().zip(&mask) {
                            *v *= m;
                        }
                        (h, Cache::Dropout { mask: Some(mask) })
                    }
                    _ => (h, Cache::Dropout { mask: None }),
                },
                LayerSpec::Residual {
                    out_channels, stride, ..
                } => {
                    let b = &self.buffers[i];
                    let h1 = ops::conv_forward(&h, &p[0], None, stride)?;
                    let (h2, bn1) = ops::bn_forward(&h1, &p[1], &p[2], &b[0], &b[1], opts.batch_stats);
                    let mid = ops::relu_forward(&h2);
                    let h4 = ops::conv_forward(&mid, &p[3], None, 1)?;
                    let (mut h5, bn2) = ops::bn_forward(&h4, &p[4], &p[5], &b[2], &b[3], opts.batch_stats);
                    h5.add_assign(&ops::shortcut_forward(&h, out_channels, stride))?;
                    let output = ops::relu_forward(&h5);
                    (
                        output.clone(),
                        Cache::Residual(Box::new(ResidualCache {
                            input: h,
                            bn1,
                            mid,
                            bn2,
                            output,
                        })),
                    )
                }
                LayerSpec::Flatten => {
                    let input_shape = h.shape().to_vec();
                    let flat = h.row_len();
                    (h.reshape(vec![batch, flat])?, Cache::Flatten { input_shape })
                }
            };
            if opts.capture == Some(i) {
                captured = Some((i, next.clone()));
            }
            caches.push(cache);
            h = next;
        }
        h.ensure_finite("forward")?;
        Ok((
            h,
            Tape {
                version: self.version,
                batch,
                caches,
                captured,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, ForwardOpts::eval())?.0)
    }

    /// Training-mode forward: batch statistics, dropout, running-stat update.
    pub fn forward_train(&mut self, x: &Tensor<T>, rng: &mut Rng) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, tape) = self.forward(x, ForwardOpts::train(rng))?;
        self.absorb_batch_stats(&tape);
        Ok((y, tape))
    }

    /// Folds a tape's batchnorm statistics into the running buffers.
    pub fn absorb_batch_stats(&mut self, tape: &Tape<T>) {
        let m = T::lit(BN_MOMENTUM);
        let upd = |buf: &mut Tensor<T>, stat: &[T]| {
            for (r, &s) in buf.data_mut().iter_mut().zip(stat) {
                *r = m * *r + (T::one() - m) * s;
            }
        };
        for (i, cache) in tape.caches.iter().enumerate() {
            match cache {
                Cache::BatchNorm(c) if c.batch_stats => {
                    let b = &mut self.buffers[i];
                    upd(&mut b[0], &c.mean);
                    upd(&mut b[1], &c.var_unbiased);
                }
                Cache::Residual(r) if r.bn1.batch_stats => {
                    let b = &mut self.buffers[i];
                    upd(&mut b[0], &r.bn1.mean);
                    upd(&mut b[1], &r.bn1.var_unbiased);
                    upd(&mut b[2], &r.bn2.mean);
                    upd(&mut b[3], &r.bn2.var_unbiased);
                }
                _ => {}
            }
        }
    }

    /// Reverse pass seeded with `dlogits`, i.e. gradients of `⟨dlogits, logits⟩`.
    pub fn backward(&self, tape: Tape<T>, dlogits: &Tensor<T>, req: BackwardRequest) -> Result<Gradients<T>> {
        if tape.version != self.version || tape.caches.len() != self.layers.len() {
            return Err(Error::State(format!(
                "tape from parameter version {} used with version {}",
                tape.version, self.version
            )));
        }
        if dlogits.shape() != [tape.batch, self.num_classes] {
            return Err(dim_err(format!(
                "dlogits {:?} does not match logits [{}, {}]",
                dlogits.shape(),
                tape.batch,
                self.num_classes
            )));
        }
        if req.feature && tape.captured.is_none() {
            return Err(Error::State("feature gradients requested but no layer was captured".into()));
        }
        let mode = req.relu_mode;
        let mut grad = dlogits.clone();
        let mut param_grads: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        let mut feature = None;
        let mut taps = Vec::new();
        let Tape { caches, captured, .. } = tape;
        let captured_layer = captured.as_ref().map(|(i, _)| *i);
        let mut captured = captured;
        // Layers below the first weighted layer need no input gradient unless asked.
        for (i, cache) in caches.into_iter().enumerate().rev() {
            if req.feature && captured_layer == Some(i) {
                let (layer, activations) = captured.take().expect("captured");
                feature = Some(FeatureGrads {
                    layer,
                    activations,
                    grads: grad.clone(),
                });
                if !req.params && !req.input {
                    break;
                }
            }
            let need_dx = i > 0 || req.input;
            let p = &self.params[i];
            let mut pg = Vec::new();
            grad = match (cache, &self.layers[i]) {
                (Cache::Dense { input }, _) => {
                    let g = ops::dense_backward(&input, &p[0], &grad, req.params, need_dx);
                    pg.extend(g.dw);
                    pg.extend(g.db);
                    g.dx.unwrap_or(grad)
                }
                (Cache::Conv { input }, LayerSpec::Conv3x3 { stride, bias, .. }) => {
                    let g = ops::conv_backward(&input, &p[0], *bias, *stride, &grad, req.params, need_dx)?;
                    pg.extend(g.dw);
                    pg.extend(g.db);
                    g.dx.unwrap_or(grad)
                }
                (Cache::Relu { output }, _) => {
                    let dx = ops::relu_backward(&output, &grad, mode);
                    if req.relu_taps {
                        taps.push(ReluTap {
                            forward_output: output,
                            grad: dx.clone(),
                        });
                    }
                    dx
                }
                (Cache::MaxPool { input_shape, idx }, _) => ops::maxpool_backward(&input_shape, &idx, &grad),
                (Cache::BatchNorm(c), _) => {
                    let (dx, dg, db) = ops::bn_backward(&c, &p[0], &grad);
                    if req.params {
                        pg.push(dg);
                        pg.push(db);
                    }
                    dx
                }
                (Cache::Gap { input_shape }, _) => ops::gap_backward(&input_shape, &grad),
                (Cache::Dropout { mask }, _) => {
                    if let Some(mask) = mask {
                        for (g, &m) in grad.data_mut().iter_mut().zip(&mask) {
                            *g *= m;
                        }
                    }
                    grad
                }
                (Cache::Residual(r), LayerSpec::Residual { stride, .. }) => {
                    let r = *r;
                    let g_sum = ops::relu_backward(&r.output, &grad, mode);
                    let (g4, dg2, db2) = ops::bn_backward(&r.bn2, &p[4], &g_sum);
                    let c2 = ops::conv_backward(&r.mid, &p[3], false, 1, &g4, req.params, true)?;
                    let g_mid = c2.dx.expect("dx requested");
                    let g2 = ops::relu_backward(&r.mid, &g_mid, mode);
                    let (g1, dg1, db1) = ops::bn_backward(&r.bn1, &p[1], &g2);
                    let c1 = ops::conv_backward(&r.input, &p[0], false, *stride, &g1, req.params, need_dx)?;
                    if req.relu_taps {
                        taps.push(ReluTap {
                            forward_output: r.output,
                            grad: g_sum.clone(),
                        });
                        taps.push(ReluTap {
                            forward_output: r.mid,
                            grad: g2,
                        });
                    }
                    if req.params {
                        pg.extend(c1.dw);
                        pg.push(dg1);
                        pg.push(db1);
                        pg.extend(c2.dw);
                        pg.push(dg2);
                        pg.push(db2);
                    }
                    match c1.dx {
                        Some(mut dx) => {
                            dx.add_assign(&ops::shortcut_backward(r.input.shape(), &g_sum, *stride))?;
                            dx
                        }
                        None => g_sum,
                    }
                }
                (Cache::Flatten { input_shape }, _) => grad.reshape(input_shape)?,
                (_, spec) => return Err(Error::State(format!("tape entry does not match layer {spec:?}"))),
            };
            param_grads.push(pg);
        }
        param_grads.reverse();
        Ok(Gradients {
            params: req.params.then(|| param_grads.into_iter().flatten().collect()),
            input: req.input.then_some(grad),
            feature,
            relu_taps: taps,
        })
    }

    pub fn backward_params(&self, tape: Tape<T>, dlogits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self
            .backward(tape, dlogits, BackwardRequest::params())?
            .params
            .expect("requested"))
    }

    /// Gradient of `⟨selector, logits⟩` with respect to the input batch.
    pub fn backward_input(&self, tape: Tape<T>, selector: &Tensor<T>, mode: ReluMode) -> Result<Tensor<T>> {
        Ok(self
            .backward(tape, selector, BackwardRequest::input(mode))?
            .input
            .expect("requested"))
    }

    /// Activations at `layer` and the gradient of `⟨selector, logits⟩` with
    /// respect to them. The tape must come from a forward that captured `layer`.
    pub fn feature_grads(&self, tape: Tape<T>, selector: &Tensor<T>, layer: usize) -> Result<FeatureGrads<T>> {
        self.check_feature_layer(layer)?;
        match tape.captured {
            Some((l, _)) if l == layer => {}
            _ => {
                return Err(Error::State(format!(
                    "tape did not capture layer {layer}; forward with ForwardOpts::capture"
                )))
            }
        }
        let req = BackwardRequest {
            params: false,
            input: false,
            relu_mode: ReluMode::Standard,
            feature: true,
            relu_taps: false,
        };
        Ok(self.backward(tape, selector, req)?.feature.expect("requested"))
    }
}

#[cfg(test)]
mod tests;
