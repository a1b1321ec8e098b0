//! CNN-attention keyword classifier.
//!
//! Log-mel input `[B, T, F]` is treated as a one-channel `F x T` image, passed
//! through strided convolutions, flattened to `channels * mel` per time step,
//! encoded by post-norm self-attention layers, and the last `r` steps are
//! concatenated into a bottleneck layer. Task heads read the bottleneck
//! (`project`, `reconstruct`) or the per-step encoder output (`apc`, `mpc`).

use std::collections::BTreeMap;
use std::convert::Infallible;

use kws_tensor::{conv_output_len, Element, Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_conv: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub n_attn: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Number of final encoder steps concatenated for the bottleneck.
    pub r: usize,
    pub d_bottleneck: usize,
    pub n_classes: usize,
    pub d_feat: usize,
    pub d_recon: usize,
    pub dropout: f64,
    pub positional: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_conv: 2,
            conv_channels: 32,
            kernel: 3,
            stride: 2,
            n_attn: 2,
            d_model: 320,
            n_heads: 4,
            d_ff: 1024,
            r: 2,
            d_bottleneck: 800,
            n_classes: 12,
            d_feat: 40,
            d_recon: 40,
            dropout: 0.1,
            positional: true,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Mel bins left after the convolution stack.
    pub fn mel_after_conv(&self) -> usize {
        (0..self.n_conv).fold(self.d_feat, |n, _| conv_output_len(n, self.stride))
    }

    /// Encoder sequence length for `frames` input frames.
    pub fn seq_len(&self, frames: usize) -> usize {
        (0..self.n_conv).fold(frames, |n, _| conv_output_len(n, self.stride))
    }

    pub fn min_input_frames(&self) -> usize {
        self.stride.pow(self.n_conv as u32) * (self.r - 1) + 1
    }

    /// Input frames covered by one encoder step.
    pub fn frames_per_step(&self) -> usize {
        self.stride.pow(self.n_conv as u32)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_conv", self.n_conv),
            ("conv_channels", self.conv_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("r", self.r),
            ("d_bottleneck", self.d_bottleneck),
            ("n_classes", self.n_classes),
            ("d_feat", self.d_feat),
            ("d_recon", self.d_recon),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Param(format!("model {name} must be positive")));
        }
        let flat = self.conv_channels * self.mel_after_conv();
        if flat != self.d_model {
            return Err(Error::Param(format!(
                "conv output flattens to {} x {} = {flat} per step, but d_model is {}",
                self.conv_channels,
                self.mel_after_conv(),
                self.d_model
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Param(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Param("norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Which optional heads a parameter set carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeadSet {
    pub project: bool,
    pub reconstruct: bool,
    pub apc: bool,
    pub mpc: bool,
}

impl HeadSet {
    pub fn classifier() -> Self {
        HeadSet { project: true, ..Default::default() }
    }

    pub fn all() -> Self {
        HeadSet { project: true, reconstruct: true, apc: true, mpc: true }
    }
}

macro_rules! pair_struct {
    ($name:ident, $a:ident, $b:ident) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            pub $a: P,
            pub $b: P,
        }

        impl<P> $name<P> {
            fn try_map<Q, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<$name<Q>, E> {
                Ok($name {
                    $a: f(&format!("{prefix}.{}", stringify!($a)), &self.$a)?,
                    $b: f(&format!("{prefix}.{}", stringify!($b)), &self.$b)?,
                })
            }

            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
                out.push((format!("{prefix}.{}", stringify!($a)), &self.$a));
                out.push((format!("{prefix}.{}", stringify!($b)), &self.$b));
            }

            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
                out.push((format!("{prefix}.{}", stringify!($a)), &mut self.$a));
                out.push((format!("{prefix}.{}", stringify!($b)), &mut self.$b));
            }
        }
    };
}

pair_struct!(Linear, weight, bias);
pair_struct!(ConvLayer, kernel, bias);
pair_struct!(Norm, gain, shift);

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<P> {
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub output: Linear<P>,
    pub norm1: Norm<P>,
    pub ff1: Linear<P>,
    pub ff2: Linear<P>,
    pub norm2: Norm<P>,
}

impl<P> AttentionLayer<P> {
    fn try_map<Q, E>(&self, p: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<AttentionLayer<Q>, E> {
        Ok(AttentionLayer {
            query: self.query.try_map(&format!("{p}.query"), f)?,
            key: self.key.try_map(&format!("{p}.key"), f)?,
            value: self.value.try_map(&format!("{p}.value"), f)?,
            output: self.output.try_map(&format!("{p}.output"), f)?,
            norm1: self.norm1.try_map(&format!("{p}.norm1"), f)?,
            ff1: self.ff1.try_map(&format!("{p}.ff1"), f)?,
            ff2: self.ff2.try_map(&format!("{p}.ff2"), f)?,
            norm2: self.norm2.try_map(&format!("{p}.norm2"), f)?,
        })
    }

    fn collect<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a P)>) {
        self.query.collect(&format!("{p}.query"), out);
        self.key.collect(&format!("{p}.key"), out);
        self.value.collect(&format!("{p}.value"), out);
        self.output.collect(&format!("{p}.output"), out);
        self.norm1.collect(&format!("{p}.norm1"), out);
        self.ff1.collect(&format!("{p}.ff1"), out);
        self.ff2.collect(&format!("{p}.ff2"), out);
        self.norm2.collect(&format!("{p}.norm2"), out);
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.query.collect_mut(&format!("{p}.query"), out);
        self.key.collect_mut(&format!("{p}.key"), out);
        self.value.collect_mut(&format!("{p}.value"), out);
        self.output.collect_mut(&format!("{p}.output"), out);
        self.norm1.collect_mut(&format!("{p}.norm1"), out);
        self.ff1.collect_mut(&format!("{p}.ff1"), out);
        self.ff2.collect_mut(&format!("{p}.ff2"), out);
        self.norm2.collect_mut(&format!("{p}.norm2"), out);
    }
}

/// Every named tensor of the network. `P` is a tensor for stored parameters,
/// a [`Var`] once bound to a tape, or a [`Slot`] for the bare layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<P> {
    pub conv: Vec<ConvLayer<P>>,
    pub attn: Vec<AttentionLayer<P>>,
    pub bottleneck: Linear<P>,
    pub project: Option<Linear<P>>,
    pub reconstruct: Option<Linear<P>>,
    pub apc: Option<Linear<P>>,
    pub mpc: Option<Linear<P>>,
}

fn map_head<P, Q, E>(
    head: &Option<Linear<P>>,
    name: &str,
    f: &mut impl FnMut(&str, &P) -> Result<Q, E>,
) -> Result<Option<Linear<Q>>, E> {
    head.as_ref().map(|h| h.try_map(name, f)).transpose()
}

impl<P> Weights<P> {
    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&str, &P) -> Result<Q, E>) -> Result<Weights<Q>, E> {
        let f = &mut f;
        Ok(Weights {
            conv: self
                .conv
                .iter()
                .enumerate()
                .map(|(i, c)| c.try_map(&format!("conv.{i}"), f))
                .collect::<Result<_, E>>()?,
            attn: self
                .attn
                .iter()
                .enumerate()
                .map(|(i, a)| a.try_map(&format!("attn.{i}"), f))
                .collect::<Result<_, E>>()?,
            bottleneck: self.bottleneck.try_map("bottleneck", f)?,
            project: map_head(&self.project, "project", f)?,
            reconstruct: map_head(&self.reconstruct, "reconstruct", f)?,
            apc: map_head(&self.apc, "apc", f)?,
            mpc: map_head(&self.mpc, "mpc", f)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> Weights<Q> {
        match self.try_map(|n, p| Ok::<Q, Infallible>(f(n, p))) {
            Ok(w) => w,
            Err(never) => match never {},
        }
    }

    /// Named entries in a fixed order (encoder first, then heads).
    pub fn entries(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            c.collect(&format!("conv.{i}"), &mut out);
        }
        for (i, a) in self.attn.iter().enumerate() {
            a.collect(&format!("attn.{i}"), &mut out);
        }
        self.bottleneck.collect("bottleneck", &mut out);
        for (name, head) in self.heads() {
            head.collect(name, &mut out);
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter_mut().enumerate() {
            c.collect_mut(&format!("conv.{i}"), &mut out);
        }
        for (i, a) in self.attn.iter_mut().enumerate() {
            a.collect_mut(&format!("attn.{i}"), &mut out);
        }
        self.bottleneck.collect_mut("bottleneck", &mut out);
        for (name, head) in [
            ("project", &mut self.project),
            ("reconstruct", &mut self.reconstruct),
            ("apc", &mut self.apc),
            ("mpc", &mut self.mpc),
        ] {
            if let Some(h) = head {
                h.collect_mut(name, &mut out);
            }
        }
        out
    }

    fn heads(&self) -> Vec<(&'static str, &Linear<P>)> {
        [
            ("project", &self.project),
            ("reconstruct", &self.reconstruct),
            ("apc", &self.apc),
            ("mpc", &self.mpc),
        ]
        .into_iter()
        .filter_map(|(n, h)| h.as_ref().map(|h| (n, h)))
        .collect()
    }

    pub fn head_set(&self) -> HeadSet {
        HeadSet {
            project: self.project.is_some(),
            reconstruct: self.reconstruct.is_some(),
            apc: self.apc.is_some(),
            mpc: self.mpc.is_some(),
        }
    }
}

/// Shape and initializer of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub shape: Vec<usize>,
    pub init: SlotInit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SlotInit {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Constant(f64),
}

const BIAS_INIT: f64 = 0.1;

fn linear_slot(d_in: usize, d_out: usize) -> Linear<Slot> {
    Linear {
        weight: Slot { shape: vec![d_in, d_out], init: SlotInit::Xavier { fan_in: d_in, fan_out: d_out } },
        bias: Slot { shape: vec![d_out], init: SlotInit::Constant(BIAS_INIT) },
    }
}

fn norm_slot(d: usize) -> Norm<Slot> {
    Norm {
        gain: Slot { shape: vec![d], init: SlotInit::Constant(1.0) },
        shift: Slot { shape: vec![d], init: SlotInit::Constant(0.0) },
    }
}

impl Weights<Slot> {
    /// Parameter layout implied by `cfg` with the given heads.
    pub fn layout(cfg: &ModelConfig, heads: HeadSet) -> Self {
        let k = cfg.kernel;
        let conv = (0..cfg.n_conv)
            .map(|i| {
                let c_in = if i == 0 { 1 } else { cfg.conv_channels };
                let c_out = cfg.conv_channels;
                ConvLayer {
                    kernel: Slot {
                        shape: vec![c_out, c_in, k, k],
                        init: SlotInit::Xavier { fan_in: c_in * k * k, fan_out: c_out * k * k },
                    },
                    bias: Slot { shape: vec![c_out], init: SlotInit::Constant(BIAS_INIT) },
                }
            })
            .collect();
        let d = cfg.d_model;
        let attn = (0..cfg.n_attn)
            .map(|_| AttentionLayer {
                query: linear_slot(d, d),
                key: linear_slot(d, d),
                value: linear_slot(d, d),
                output: linear_slot(d, d),
                norm1: norm_slot(d),
                ff1: linear_slot(d, cfg.d_ff),
                ff2: linear_slot(cfg.d_ff, d),
                norm2: norm_slot(d),
            })
            .collect();
        Weights {
            conv,
            attn,
            bottleneck: linear_slot(cfg.r * d, cfg.d_bottleneck),
            project: heads.project.then(|| linear_slot(cfg.d_bottleneck, cfg.n_classes)),
            reconstruct: heads.reconstruct.then(|| linear_slot(cfg.d_bottleneck, cfg.d_recon)),
            apc: heads.apc.then(|| linear_slot(d, cfg.d_feat)),
            mpc: heads.mpc.then(|| linear_slot(d, cfg.d_feat)),
        }
    }
}

/// Draws one tensor from its own stream keyed by `(seed, name)`, so a head
/// re-created later with the same seed matches the one a fresh model gets.
pub fn init_tensor<T: Element>(name: &str, slot: &Slot, seed: u64) -> Tensor<T> {
    match slot.init {
        SlotInit::Constant(c) => Tensor::full(slot.shape.clone(), T::from_f64(c)),
        SlotInit::Xavier { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = stream(seed, &format!("init/{name}"));
            Tensor::from_fn(slot.shape.clone(), |_| T::from_f64(rng.random_range(-a..a)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KwsParams<T: Element = f32> {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<T>>,
}

impl<T: Element> KwsParams<T> {
    pub fn init(config: &ModelConfig, heads: HeadSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::layout(config, heads).map(|name, slot| init_tensor(name, slot, seed));
        Ok(KwsParams { config: config.clone(), weights })
    }

    pub fn heads(&self) -> HeadSet {
        self.weights.head_set()
    }

    pub fn param_count(&self) -> usize {
        self.weights.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> KwsParams<U> {
        KwsParams { config: self.config.clone(), weights: self.weights.map(|_, t| t.cast()) }
    }

    pub fn named(&self) -> BTreeMap<String, &Tensor<T>> {
        self.weights.entries().into_iter().collect()
    }

    /// Switches to `config`, which must give every tensor its current shape.
    pub fn adopt_config(&mut self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let layout = Weights::layout(config, self.heads());
        let want = layout.entries();
        let have = self.weights.entries();
        for (name, slot) in &want {
            match have.iter().find(|(n, _)| n == name) {
                None => return Err(Error::Checkpoint(format!("checkpoint lacks tensor {name} required by the model config"))),
                Some((_, t)) if t.shape() != slot.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, model config expects {:?}",
                        t.shape(),
                        slot.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some((name, _)) = have.iter().find(|(n, _)| !want.iter().any(|(w, _)| w == n)) {
            return Err(Error::Checkpoint(format!("checkpoint tensor {name} has no place in the model config")));
        }
        self.config = config.clone();
        Ok(())
    }

    /// Replaces the project head with a freshly initialized one.
    pub fn reset_project(&mut self, seed: u64) {
        let slot = linear_slot(self.config.d_bottleneck, self.config.n_classes);
        self.weights.project = Some(Linear {
            weight: init_tensor("project.weight", &slot.weight, seed),
            bias: init_tensor("project.bias", &slot.bias, seed),
        });
    }

    /// Puts every tensor on `tape`, as trainable params or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Weights<Var> {
        self.weights.map(|_, t| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) })
    }

    /// Evaluation-mode forward (no dropout) on equally long feature matrices.
    pub fn infer(&self, features: &[&FeatureMatrix]) -> Result<Inference<T>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let x = tape.leaf(stack_features(features)?);
        let enc = encode(&mut tape, &self.config, &w, x, None)?;
        let logits = w.project.as_ref().map(|h| linear(&mut tape, h, enc.e_bn)).transpose()?;
        let recon = w.reconstruct.as_ref().map(|h| linear(&mut tape, h, enc.e_bn)).transpose()?;
        Ok(Inference {
            e_bn: tape.value(enc.e_bn).clone(),
            logits: logits.map(|v| tape.value(v).clone()),
            recon: recon.map(|v| tape.value(v).clone()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub e_bn: Tensor<T>,
    pub logits: Option<Tensor<T>>,
    pub recon: Option<Tensor<T>>,
}

/// Stacks `[T, F]` matrices of equal size into `[B, T, F]`.
pub fn stack_features<T: Element>(features: &[&FeatureMatrix]) -> Result<Tensor<T>> {
    let first = features.first().ok_or_else(|| Error::Param("empty feature batch".into()))?;
    let (t, f) = (first.frames(), first.bins());
    let mut data = Vec::with_capacity(features.len() * t * f);
    for m in features {
        if (m.frames(), m.bins()) != (t, f) {
            return Err(Error::Param(format!(
                "batch mixes {}x{} and {t}x{f} feature matrices",
                m.frames(),
                m.bins()
            )));
        }
        data.extend(m.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::new(vec![features.len(), t, f], data)?)
}

/// Sinusoidal position table `[len, d]`: sine on even columns, cosine on odd.
pub fn positional_table<T: Element>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(vec![len, d], |i| {
        let (pos, col) = ((i / d) as f64, i % d);
        let rate = 10000f64.powf(-((col - col % 2) as f64) / d as f64);
        T::from_f64(if col % 2 == 0 { (pos * rate).sin() } else { (pos * rate).cos() })
    })
}

/// `x W + b` over the last axis of a rank-2 or rank-3 input.
pub fn linear<T: Element>(tape: &mut Tape<T>, layer: &Linear<Var>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d_in = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / d_in.max(1);
    let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, d_in])? };
    let y = tape.matmul(flat, layer.weight)?;
    let y = tape.add_broadcast(y, layer.bias)?;
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out = shape;
    *out.last_mut().unwrap() = tape.shape(y)[1];
    Ok(tape.reshape(y, &out)?)
}

/// Intermediate values of one encoder pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Output of each convolution layer, `[B, C, mel, steps]`.
    pub conv: Vec<Var>,
    /// Convolution output flattened per step, `[B, S, d_model]`.
    pub e_cnn: Var,
    /// Attention encoder output, `[B, S, d_model]`.
    pub e_tran: Var,
    /// Last `r` encoder steps concatenated, `[B, r * d_model]`.
    pub e_feat: Var,
    /// Bottleneck activations, `[B, d_bottleneck]`.
    pub e_bn: Var,
}

/// One post-norm self-attention layer on `[B, S, D]`.
pub fn attention_layer<T: Element>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    layer: &AttentionLayer<Var>,
    x: Var,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let (b, s, d) = match *tape.shape(x) {
        [b, s, d] => (b, s, d),
        ref other => return Err(Error::Param(format!("attention input must be [B, S, D], got {other:?}"))),
    };
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let flat = tape.reshape(x, &[b * s, d])?;
    let split_heads = |tape: &mut Tape<T>, proj: &Linear<Var>| -> Result<Var> {
        let y = linear(tape, proj, flat)?;
        let y = tape.reshape(y, &[b, s, h, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        Ok(tape.reshape(y, &[b * h, s, dh])?)
    };
    let q = split_heads(tape, &layer.query)?;
    let k = split_heads(tape, &layer.key)?;
    let v = split_heads(tape, &layer.value)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = tape.softmax(scores)?;
    let ctx = tape.batch_matmul(weights, v, false)?;
    let ctx = tape.reshape(ctx, &[b, h, s, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b * s, d])?;

    let mut drop = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        match rng.as_deref_mut() {
            Some(r) => Ok(tape.dropout(v, cfg.dropout, r)?),
            None => Ok(v),
        }
    };
    let attended = linear(tape, &layer.output, ctx)?;
    let attended = drop(tape, attended)?;
    let res = tape.add(flat, attended)?;
    let x1 = tape.layer_norm(res, layer.norm1.gain, layer.norm1.shift, cfg.norm_eps)?;
    let ff = linear(tape, &layer.ff1, x1)?;
    let ff = tape.relu(ff);
    let ff = linear(tape, &layer.ff2, ff)?;
    let ff = drop(tape, ff)?;
    let res = tape.add(x1, ff)?;
    let x2 = tape.layer_norm(res, layer.norm2.gain, layer.norm2.shift, cfg.norm_eps)?;
    Ok(tape.reshape(x2, &[b, s, d])?)
}

/// Runs the encoder and bottleneck on `x` of shape `[B, T, d_feat]`.
/// Dropout is applied when `dropout_rng` is given.
pub fn encode<T: Element>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    x: Var,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Encoded> {
    let (b, t, f) = match *tape.shape(x) {
        [b, t, f] => (b, t, f),
        ref other => return Err(Error::Param(format!("model input must be [B, T, F], got {other:?}"))),
    };
    if f != cfg.d_feat {
        return Err(Error::Param(format!("model expects {} feature bins, got {f}", cfg.d_feat)));
    }
    if t < cfg.min_input_frames() {
        return Err(Error::TooShort(format!(
            "sequence of {t} frames; the model needs at least {} input frames",
            cfg.min_input_frames()
        )));
    }
    let img = tape.permute(x, &[0, 2, 1])?;
    let mut h = tape.reshape(img, &[b, 1, f, t])?;
    let mut conv = Vec::with_capacity(cfg.n_conv);
    for layer in &w.conv {
        h = tape.conv2d(h, layer.kernel, layer.bias, (cfg.stride, cfg.stride))?;
        h = tape.relu(h);
        conv.push(h);
    }
    let (c, mel, s) = match *tape.shape(h) {
        [_, c, mel, s] => (c, mel, s),
        _ => unreachable!("conv2d keeps rank 4"),
    };
    let steps = tape.permute(h, &[0, 3, 1, 2])?;
    let e_cnn = tape.reshape(steps, &[b, s, c * mel])?;
    let mut seq = e_cnn;
    if cfg.positional {
        let table = tape.leaf(positional_table(s, cfg.d_model));
        seq = tape.add_broadcast(seq, table)?;
    }
    for layer in &w.attn {
        seq = attention_layer(tape, cfg, layer, seq, dropout_rng.as_deref_mut())?;
    }
    let e_tran = seq;
    let last = tape.slice(e_tran, 1, s - cfg.r, cfg.r)?;
    let e_feat = tape.reshape(last, &[b, cfg.r * cfg.d_model])?;
    let bn = linear(tape, &w.bottleneck, e_feat)?;
    let e_bn = tape.relu(bn);
    Ok(Encoded { conv, e_cnn, e_tran, e_feat, e_bn })
}

/// Applies a linear head to every encoder step: `[B, S, D] -> [B, S, out]`.
pub fn frame_head<T: Element>(tape: &mut Tape<T>, head: &Linear<Var>, e_tran: Var) -> Result<Var> {
    linear(tape, head, e_tran)
}
