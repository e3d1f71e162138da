#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikesal::grad::{central_difference, relative_error, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn binary(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_bool(p) as u8 as f64)
}

/// Worst relative error between the tape gradient of the scalar `f(inputs)`
/// and central differences at `h`, over the inputs flagged in `wrt`.
pub fn gradcheck_scalar(inputs: &[Tensor], wrt: &[bool], h: f64, f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().zip(wrt).map(|(x, &g)| tape.leaf(x.clone(), g)).collect();
    let out = f(&vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate().filter(|(i, _)| wrt[*i]) {
        let analytic = v.grad().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = central_difference(&inputs[i], h, None, |x| {
            let mut xs = inputs.to_vec();
            xs[i] = x.clone();
            let tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
            f(&vars).value().item()
        });
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}
