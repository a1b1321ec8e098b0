//! Training losses: cross-entropy, bottleneck similarity, average-feature
//! reconstruction, their weighted composite, and the APC/MPC baselines.

use kws_tensor::{Element, Tape, TensorError, Tensor, Var};

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;

/// Mean cross-entropy of `[N, C]` logits.
pub fn ce_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels).map_err(|e| match e {
        TensorError::Domain { msg, .. } => Error::Data(msg),
        other => other.into(),
    })
}

/// Mean squared difference between two bottleneck batches. Gradient flows
/// into both arguments.
pub fn sim_loss<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Mean squared error between the per-utterance frame average of `x`
/// (`[B, T, F]`) and the reconstruction `recon` (`[B, F]`).
pub fn recon_loss<T: Element>(tape: &mut Tape<T>, x: Var, recon: Var) -> Result<Var> {
    let avg = tape.mean_axis(x, 1)?;
    sim_loss(tape, avg, recon)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub sim: f64,
    pub recon: f64,
    pub recon_aug: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { sim: 0.9, recon: 0.05, recon_aug: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.sim, self.recon, self.recon_aug].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Param(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }

    pub fn combine(&self, sim: f64, recon: f64, recon_aug: f64) -> f64 {
        self.sim * sim + self.recon * recon + self.recon_aug * recon_aug
    }
}

/// Weighted composite of the three unsupervised terms.
pub fn unsup_loss<T: Element>(tape: &mut Tape<T>, sim: Var, recon: Var, recon_aug: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(sim, w.sim);
    let b = tape.scale(recon, w.recon);
    let c = tape.scale(recon_aug, w.recon_aug);
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}

/// Scalar values of one step's losses; `None` where a term does not apply.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_ce: Option<f64>,
    pub l_sim: Option<f64>,
    pub l_x: Option<f64>,
    pub l_x_aug: Option<f64>,
    pub l_ul: Option<f64>,
}

/// Averages `[B, T, F]` features over consecutive blocks of `block` frames,
/// giving `[B, steps, F]`. The last block may be partial; blocks past the end
/// repeat the final frame's block.
pub fn block_means<T: Element>(x: &Tensor<T>, block: usize, steps: usize) -> Result<Tensor<T>> {
    let (b, t, f) = match *x.shape() {
        [b, t, f] => (b, t, f),
        ref s => return Err(Error::Param(format!("block_means expects [B, T, F], got {s:?}"))),
    };
    if block == 0 {
        return Err(Error::Param("block size must be positive".into()));
    }
    let mut out = Vec::with_capacity(b * steps * f);
    for u in 0..b {
        let utt = &x.data()[u * t * f..(u + 1) * t * f];
        for s in 0..steps {
            let start = (s * block).min(t - 1);
            let end = (start + block).min(t);
            let scale = T::from_f64(1.0 / (end - start) as f64);
            for j in 0..f {
                let sum: T = (start..end).map(|r| utt[r * f + j]).sum();
                out.push(sum * scale);
            }
        }
    }
    Ok(Tensor::new(vec![b, steps, f], out)?)
}

/// Mean absolute error between predictions at step `t` and targets at step
/// `t + shift`. Both are `[B, S, F]`.
pub fn apc_loss<T: Element>(tape: &mut Tape<T>, predictions: Var, targets: Var, shift: usize) -> Result<Var> {
    let s = tape.shape(predictions).to_vec();
    if s.len() != 3 || tape.shape(targets) != s.as_slice() {
        return Err(Error::Param(format!(
            "apc predictions {s:?} and targets {:?} must both be [B, S, F]",
            tape.shape(targets)
        )));
    }
    if shift == 0 {
        return Err(Error::Param("apc shift must be at least 1".into()));
    }
    if s[1] <= shift {
        return Err(Error::TooShort(format!("apc needs more than {shift} steps, got {}", s[1])));
    }
    let valid = s[1] - shift;
    let p = tape.slice(predictions, 1, 0, valid)?;
    let y = tape.slice(targets, 1, shift, valid)?;
    let d = tape.sub(p, y)?;
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Keep,
    Zero,
    /// Replaced by the content of another unit of the same sequence.
    Swap(usize),
    /// Chosen for scoring but left as is.
    Unchanged,
}

impl MaskAction {
    pub fn is_chosen(self) -> bool {
        self != MaskAction::Keep
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub choose: f64,
    pub zero: f64,
    pub swap: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { choose: 0.15, zero: 0.8, swap: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub actions: Vec<MaskAction>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskCounts {
    pub units: usize,
    pub chosen: usize,
    pub zero: usize,
    pub swap: usize,
    pub unchanged: usize,
}

impl MaskCounts {
    pub fn add(&mut self, other: &MaskCounts) {
        self.units += other.units;
        self.chosen += other.chosen;
        self.zero += other.zero;
        self.swap += other.swap;
        self.unchanged += other.unchanged;
    }
}

impl MaskPlan {
    /// Draws an independent action for each of `units` positions.
    pub fn draw<R: rand::Rng + ?Sized>(units: usize, cfg: &MaskConfig, rng: &mut R) -> Self {
        let actions = (0..units)
            .map(|i| {
                if rng.random::<f64>() >= cfg.choose {
                    return MaskAction::Keep;
                }
                let u = rng.random::<f64>();
                if u < cfg.zero {
                    MaskAction::Zero
                } else if u < cfg.zero + cfg.swap {
                    if units < 2 {
                        return MaskAction::Unchanged;
                    }
                    let j = rng.random_range(0..units - 1);
                    MaskAction::Swap(if j >= i { j + 1 } else { j })
                } else {
                    MaskAction::Unchanged
                }
            })
            .collect();
        MaskPlan { actions }
    }

    pub fn counts(&self) -> MaskCounts {
        let mut c = MaskCounts { units: self.actions.len(), ..Default::default() };
        for a in &self.actions {
            match a {
                MaskAction::Keep => {}
                MaskAction::Zero => c.zero += 1,
                MaskAction::Swap(_) => c.swap += 1,
                MaskAction::Unchanged => c.unchanged += 1,
            }
        }
        c.chosen = c.zero + c.swap + c.unchanged;
        c
    }

    /// Applies the plan to a `[T, F]` row-major block where each unit covers
    /// `block` consecutive frames. Swaps read from the unmodified input.
    pub fn apply(&self, frames: &mut [f32], bins: usize, block: usize) {
        let original = frames.to_vec();
        let t = frames.len() / bins;
        let span = |u: usize| {
            let start = (u * block).min(t);
            start * bins..((u + 1) * block).min(t) * bins
        };
        for (u, action) in self.actions.iter().enumerate() {
            let dst = span(u);
            match *action {
                MaskAction::Keep | MaskAction::Unchanged => {}
                MaskAction::Zero => frames[dst].fill(0.0),
                MaskAction::Swap(src) => {
                    let src = span(src);
                    let n = dst.len().min(src.len());
                    frames[dst.start..dst.start + n].copy_from_slice(&original[src.start..src.start + n]);
                    frames[dst.start + n..dst.end].fill(0.0);
                }
            }
        }
    }
}

/// Masks individual frames of `features` with a fresh plan.
pub fn mpc_mask<R: rand::Rng + ?Sized>(features: &FeatureMatrix, cfg: &MaskConfig, rng: &mut R) -> Result<(FeatureMatrix, MaskPlan)> {
    let plan = MaskPlan::draw(features.frames(), cfg, rng);
    let mut out = features.clone();
    plan.apply(out.data_mut(), features.bins(), 1);
    Ok((out, plan))
}

/// Weights `[B, S, F]` that are 1 on chosen units and 0 elsewhere.
pub fn mask_weights<T: Element>(plans: &[MaskPlan], bins: usize) -> Result<Tensor<T>> {
    let steps = plans.first().map_or(0, |p| p.actions.len());
    if plans.iter().any(|p| p.actions.len() != steps) || steps == 0 {
        return Err(Error::Param("mask plans must be non-empty and equally long".into()));
    }
    let data = plans
        .iter()
        .flat_map(|p| p.actions.iter())
        .flat_map(|a| std::iter::repeat_n(if a.is_chosen() { T::one() } else { T::zero() }, bins))
        .collect();
    Ok(Tensor::new(vec![plans.len(), steps, bins], data)?)
}

/// L1 error over chosen units only, normalized by `chosen * F`; zero when
/// nothing was chosen.
pub fn mpc_loss<T: Element>(tape: &mut Tape<T>, predictions: Var, targets: Var, mask: &Tensor<T>) -> Result<Var> {
    let s = tape.shape(predictions).to_vec();
    if tape.shape(targets) != s.as_slice() || mask.shape() != s.as_slice() || s.len() != 3 {
        return Err(Error::Param(format!(
            "mpc predictions {s:?}, targets {:?} and mask {:?} must agree as [B, S, F]",
            tape.shape(targets),
            mask.shape()
        )));
    }
    let chosen_units = mask.data().iter().filter(|v| **v != T::zero()).count() / s[2];
    let m = tape.leaf(mask.clone());
    let d = tape.sub(predictions, targets)?;
    let a = tape.abs(d);
    let masked = tape.mul(a, m)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale(total, 1.0 / (chosen_units.max(1) * s[2]) as f64))
}
