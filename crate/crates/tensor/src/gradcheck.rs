//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is checking.

use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `||a - n|| / max(||a||, ||n||)`, or 0 when both gradients vanish.
pub fn relative_error(autodiff: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = autodiff.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(autodiff).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Up to `max` distinct flat indices, all of them when `numel <= max`.
pub fn sample_coords<R: Rng + ?Sized>(numel: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let mut idx = sample(rng, numel, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` at each index.
pub fn central_difference(
    x: &mut Tensor<f64>,
    coords: &[usize],
    h: f64,
    mut eval: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + h;
            let up = eval(x);
            x.data_mut()[i] = orig - h;
            let down = eval(x);
            x.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Checks the gradient of every input of `f` against central differences.
///
/// The output of `f` is reduced to a scalar with fixed random weights so
/// non-scalar primitives are covered too. Returns one relative error per
/// input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, max_coords: usize, seed: u64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = StdRng::seed_from_u64(seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let weights = Tensor::from_fn(out_shape, |_| rng.random_range(-1.0..1.0));
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss)?;

    let project = |inputs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vars).expect("forward succeeded once");
        t.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let coords = sample_coords(inputs[k].numel(), max_coords, &mut rng);
        let auto = grads.wrt(*var);
        let auto: Vec<f64> = coords.iter().map(|&i| auto.data()[i]).collect();
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut x = work[k].clone();
        let numeric = central_difference(&mut x, &coords, h, |xk| {
            work[k] = xk.clone();
            project(&work)
        });
        errors.push(relative_error(&auto, &numeric));
    }
    Ok(errors)
}
