//! Model checkpoints on top of the tensor container.
//!
//! Besides parameters, a checkpoint carries `meta/*` tensors (model config,
//! step, stage) and optionally `adam/*` optimizer state. Integers are stored
//! as 16-bit limbs so every value is exact in `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use kws_tensor::Tensor;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{HeadSet, KwsParams, ModelConfig, Weights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
    Supervised,
}

impl Stage {
    fn code(self) -> u64 {
        match self {
            Stage::Init => 0,
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
            Stage::Supervised => 3,
        }
    }

    fn from_code(c: u64) -> Result<Self> {
        Ok(match c {
            0 => Stage::Init,
            1 => Stage::Pretrain,
            2 => Stage::Finetune,
            3 => Stage::Supervised,
            other => return Err(Error::Checkpoint(format!("unknown stage code {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Supervised => "supervised",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: KwsParams<f32>,
    pub step: u64,
    pub stage: Stage,
    pub optimizer: Option<OptimizerState>,
}

const DROPOUT_SCALE: f64 = 1e6;
const EPS_SCALE: f64 = 1e9;

fn encode_u64(v: u64) -> Tensor<f32> {
    let limbs = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(vec![4], limbs).expect("four limbs")
}

fn decode_u64(t: &Tensor<f32>, what: &str) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::Checkpoint(format!("{what}: expected 4 limbs, got shape {:?}", t.shape())));
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (i, &v)| {
        if v < 0.0 || v > 65535.0 || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("{what}: limb {v} is not a 16-bit integer")));
        }
        Ok(acc | ((v as u64) << (16 * i)))
    })
}

fn scaled(v: f64, scale: f64, what: &str) -> Result<f32> {
    let s = (v * scale).round();
    if s > (1u64 << 24) as f64 || (s / scale) != v {
        return Err(Error::Checkpoint(format!("{what} = {v} is not representable in the checkpoint header")));
    }
    Ok(s as f32)
}

fn encode_config(c: &ModelConfig) -> Result<Tensor<f32>> {
    let ints = [
        c.n_conv,
        c.conv_channels,
        c.kernel,
        c.stride,
        c.n_attn,
        c.d_model,
        c.n_heads,
        c.d_ff,
        c.r,
        c.d_bottleneck,
        c.n_classes,
        c.d_feat,
        c.d_recon,
        c.positional as usize,
    ];
    if let Some(v) = ints.iter().find(|&&v| v > 1 << 24) {
        return Err(Error::Checkpoint(format!("model config value {v} too large")));
    }
    let mut data: Vec<f32> = ints.iter().map(|&v| v as f32).collect();
    data.push(scaled(c.dropout, DROPOUT_SCALE, "dropout")?);
    data.push(scaled(c.norm_eps, EPS_SCALE, "norm_eps")?);
    Ok(Tensor::new(vec![data.len()], data)?)
}

fn decode_config(t: &Tensor<f32>) -> Result<ModelConfig> {
    let d = t.data();
    if t.shape() != [16] {
        return Err(Error::Checkpoint(format!("meta/model_config: expected 16 values, got {:?}", t.shape())));
    }
    let u = |i: usize| d[i] as usize;
    let cfg = ModelConfig {
        n_conv: u(0),
        conv_channels: u(1),
        kernel: u(2),
        stride: u(3),
        n_attn: u(4),
        d_model: u(5),
        n_heads: u(6),
        d_ff: u(7),
        r: u(8),
        d_bottleneck: u(9),
        n_classes: u(10),
        d_feat: u(11),
        d_recon: u(12),
        positional: d[13] != 0.0,
        dropout: d[14] as f64 / DROPOUT_SCALE,
        norm_eps: d[15] as f64 / EPS_SCALE,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("meta/model_config: {e}")))?;
    Ok(cfg)
}

impl Checkpoint {
    pub fn new(params: KwsParams<f32>, step: u64, stage: Stage) -> Self {
        Checkpoint { params, step, stage, optimizer: None }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push("meta/model_config", encode_config(&self.params.config)?)?;
        c.push("meta/step", encode_u64(self.step))?;
        c.push("meta/stage", Tensor::new(vec![1], vec![self.stage.code() as f32])?)?;
        for (name, t) in self.params.weights.entries() {
            c.push(name, t.clone())?;
        }
        if let Some(opt) = &self.optimizer {
            c.push("adam/step", encode_u64(opt.step))?;
            for (name, (m, v)) in &opt.moments {
                c.push(format!("adam/m/{name}"), m.clone())?;
                c.push(format!("adam/v/{name}"), v.clone())?;
            }
        }
        Ok(c)
    }

    /// Rebuilds a checkpoint, checking every parameter against the layout
    /// implied by the stored model config.
    pub fn from_container(c: Container) -> Result<Self> {
        let mut tensors: BTreeMap<String, Tensor<f32>> = c.into_entries().into_iter().collect();
        let mut take_meta = |name: &str| {
            tensors.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let config = decode_config(&take_meta("meta/model_config")?)?;
        let step = decode_u64(&take_meta("meta/step")?, "meta/step")?;
        let stage_t = take_meta("meta/stage")?;
        let stage = Stage::from_code(stage_t.data()[0] as u64)?;

        let heads = HeadSet {
            project: tensors.contains_key("project.weight"),
            reconstruct: tensors.contains_key("reconstruct.weight"),
            apc: tensors.contains_key("apc.weight"),
            mpc: tensors.contains_key("mpc.weight"),
        };
        let weights: Weights<Tensor<f32>> = Weights::layout(&config, heads).try_map(|name, slot| {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model config expects {:?}",
                    t.shape(),
                    slot.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} holds non-finite values")));
            }
            Ok(t)
        })?;
        let params = KwsParams { config, weights };

        let optimizer = match tensors.remove("adam/step") {
            None => None,
            Some(t) => {
                let opt_step = decode_u64(&t, "adam/step")?;
                let mut moments = BTreeMap::new();
                for (name, p) in params.weights.entries() {
                    let m = tensors.remove(&format!("adam/m/{name}"));
                    let v = tensors.remove(&format!("adam/v/{name}"));
                    match (m, v) {
                        (Some(m), Some(v)) if m.shape() == p.shape() && v.shape() == p.shape() => {
                            moments.insert(name, (m, v));
                        }
                        (None, None) => {}
                        _ => return Err(Error::Checkpoint(format!("optimizer moments for {name} are incomplete or misshapen"))),
                    }
                }
                Some(OptimizerState { step: opt_step, moments })
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint { params, step, stage, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
