//! Finite-difference sweep over every differentiable primitive and the
//! composite training losses, five random shapes each.

use kws_tensor::gradcheck::check_gradients;
use kws_tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::objectives::{apc_loss, ce_loss, recon_loss, sim_loss, unsup_loss, LossWeights};
use crate::rng::{stream, Rng as StreamRng};
use crate::Result;

pub const SHAPES_PER_CASE: usize = 5;
const STEP: f64 = 1e-5;
const COORDS: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    /// Worst relative error over the inputs of this case.
    pub error: f64,
}

fn uniform(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Uniform values kept at least `gap` away from zero, for kinked functions.
fn off_zero(shape: &[usize], gap: f64, rng: &mut StreamRng) -> Tensor<f64> {
    uniform(shape, rng).map(|x| x.signum() * (x.abs() + gap))
}

fn lift(e: crate::Error) -> TensorError {
    TensorError::Domain { op: "loss", msg: e.to_string() }
}

struct Suite {
    seed: u64,
    cases: Vec<GradCase>,
}

impl Suite {
    fn check(
        &mut self,
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> kws_tensor::Result<Var>,
    ) -> Result<()> {
        let shape = inputs[0].shape().to_vec();
        self.seed += 1;
        let errs = check_gradients(&inputs, STEP, COORDS, self.seed, f)?;
        let error = errs.into_iter().fold(0.0, f64::max);
        self.cases.push(GradCase { name, shape, error });
        Ok(())
    }
}

/// Runs the whole sweep. Deterministic in `seed`.
pub fn run(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = stream(seed, "gradsuite");
    let mut s = Suite { seed, cases: Vec::new() };
    for _ in 0..SHAPES_PER_CASE {
        let (m, k, n, b) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4));
        s.check("matmul", vec![uniform(&[m, k], &mut rng), uniform(&[k, n], &mut rng)], |t, v| t.matmul(v[0], v[1]))?;
        s.check("batch_matmul", vec![uniform(&[b, m, k], &mut rng), uniform(&[b, k, n], &mut rng)], |t, v| {
            t.batch_matmul(v[0], v[1], false)
        })?;
        s.check("batch_matmul_t", vec![uniform(&[b, m, k], &mut rng), uniform(&[b, n, k], &mut rng)], |t, v| {
            t.batch_matmul(v[0], v[1], true)
        })?;

        let sh = [rng.random_range(1..6), rng.random_range(1..7)];
        let (x, y) = (uniform(&sh, &mut rng), uniform(&sh, &mut rng));
        s.check("add", vec![x.clone(), y.clone()], |t, v| t.add(v[0], v[1]))?;
        s.check("sub", vec![x.clone(), y.clone()], |t, v| t.sub(v[0], v[1]))?;
        s.check("mul", vec![x.clone(), y.clone()], |t, v| t.mul(v[0], v[1]))?;
        s.check("scale", vec![x.clone()], |t, v| Ok(t.scale(v[0], -1.7)))?;
        s.check("relu", vec![off_zero(&sh, 0.05, &mut rng)], |t, v| Ok(t.relu(v[0])))?;
        s.check("abs", vec![off_zero(&sh, 0.05, &mut rng)], |t, v| Ok(t.abs(v[0])))?;
        s.check("log", vec![x.map(|v| v.abs() + 0.5)], |t, v| t.log(v[0]))?;
        s.check("add_broadcast", vec![x.clone(), uniform(&sh[1..], &mut rng)], |t, v| t.add_broadcast(v[0], v[1]))?;
        s.check("dropout", vec![x.clone()], move |t, v| t.dropout(v[0], 0.3, &mut stream(seed, "gradsuite/dropout")))?;

        let s3 = [rng.random_range(1..4), rng.random_range(2..5), rng.random_range(1..5)];
        let x3 = uniform(&s3, &mut rng);
        let other = uniform(&[s3[0], rng.random_range(1..4), s3[2]], &mut rng);
        s.check("concat", vec![x3.clone(), other], |t, v| t.concat(&[v[0], v[1]], 1))?;
        s.check("reshape", vec![x3.clone()], |t, v| t.reshape(v[0], &[s3[0] * s3[1], s3[2]]))?;
        s.check("permute", vec![x3.clone()], |t, v| t.permute(v[0], &[2, 0, 1]))?;
        s.check("slice", vec![x3.clone()], |t, v| t.slice(v[0], 1, 1, s3[1] - 1))?;
        s.check("mean_axis", vec![x3.clone()], |t, v| t.mean_axis(v[0], 1))?;
        s.check("mean_all", vec![x3.clone()], |t, v| Ok(t.mean_all(v[0])))?;
        s.check("sum_all", vec![x3.clone()], |t, v| Ok(t.sum_all(v[0])))?;
        s.check("softmax", vec![x3.clone()], |t, v| t.softmax(v[0]))?;
        s.check("transpose", vec![uniform(&[s3[1], s3[2]], &mut rng)], |t, v| t.transpose(v[0]))?;

        let (bb, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
        s.check(
            "conv2d",
            vec![uniform(&[bb, ci, h, w], &mut rng), uniform(&[co, ci, 3, 3], &mut rng), uniform(&[co], &mut rng)],
            |t, v| t.conv2d(v[0], v[1], v[2], (2, 2)),
        )?;
        let (rows, d) = (rng.random_range(1..5), rng.random_range(2..8));
        s.check("layer_norm", vec![uniform(&[rows, d], &mut rng), uniform(&[d], &mut rng), uniform(&[d], &mut rng)], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        })?;

        // composite losses on [B, 12] logits, [B, U] bottlenecks, [B, T, F] features
        let (bsz, units, frames, feat) = (rng.random_range(1..6), rng.random_range(2..12), rng.random_range(2..8), rng.random_range(2..6));
        let labels: Vec<usize> = (0..bsz).map(|_| rng.random_range(0..12)).collect();
        s.check("ce_loss", vec![uniform(&[bsz, 12], &mut rng).map(|x| 3.0 * x)], |t, v| ce_loss(t, v[0], &labels).map_err(lift))?;
        let (e, e_aug) = (uniform(&[bsz, units], &mut rng), uniform(&[bsz, units], &mut rng));
        s.check("sim_loss", vec![e.clone(), e_aug.clone()], |t, v| sim_loss(t, v[0], v[1]).map_err(lift))?;
        let (x, x_aug) = (uniform(&[bsz, frames, feat], &mut rng), uniform(&[bsz, frames, feat], &mut rng));
        let (r, r_aug) = (uniform(&[bsz, feat], &mut rng), uniform(&[bsz, feat], &mut rng));
        s.check("recon_loss", vec![x.clone(), r.clone()], |t, v| recon_loss(t, v[0], v[1]).map_err(lift))?;
        let weights = LossWeights::default();
        s.check("unsup_loss", vec![e, e_aug, x, x_aug, r, r_aug], |t, v| {
            let sim = sim_loss(t, v[0], v[1]).map_err(lift)?;
            let rec = recon_loss(t, v[2], v[4]).map_err(lift)?;
            let rec_aug = recon_loss(t, v[3], v[5]).map_err(lift)?;
            unsup_loss(t, sim, rec, rec_aug, &weights).map_err(lift)
        })?;
        let steps = frames + 3;
        let targets = uniform(&[bsz, steps, feat], &mut rng);
        // predictions sit a nonzero offset from their shifted targets, off the L1 kink
        let offset = off_zero(&[bsz, steps, feat], 0.05, &mut rng);
        let preds = Tensor::from_fn(vec![bsz, steps, feat], |i| {
            let t = (i / feat) % steps;
            let target = if t + 3 < steps { targets.data()[i + 3 * feat] } else { 0.0 };
            target + offset.data()[i]
        });
        s.check("apc_loss", vec![preds, targets], |t, v| apc_loss(t, v[0], v[1], 3).map_err(lift))?;
    }
    Ok(s.cases)
}
