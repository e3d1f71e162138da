use rand::Rng;

use super::{BufferId, GradError, NormStats, ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Square-kernel stride-1 convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(rng, &[c_out, c_in, kernel, kernel], fan_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self { weight, bias, c_in, c_out, kernel }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &mut ParamStore, x: Var<'t>) -> Result<Var<'t>, GradError> {
        let w = store.bind(tape, self.weight);
        let b = self.bias.map(|b| store.bind(tape, b));
        x.conv2d(w, b, self.kernel / 2)
    }

    /// Multiply-accumulates of one dense application at `h x w` output.
    pub fn dense_ops(&self, h: usize, w: usize) -> u64 {
        (h * w * self.kernel * self.kernel * self.c_in * self.c_out) as u64
    }

    /// Synaptic fan-out of one input element.
    pub fn fan_out(&self) -> u64 {
        (self.kernel * self.kernel * self.c_out) as u64
    }
}

/// Fully connected map over the last axis of a `(rows, in)` tensor.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(rng, &[d_out, d_in], d_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &mut ParamStore, x: Var<'t>) -> Result<Var<'t>, GradError> {
        let w = store.bind(tape, self.weight);
        let b = self.bias.map(|b| store.bind(tape, b));
        x.linear(w, b)
    }
}

/// Batch normalisation over axis 1 with running statistics.
///
/// Training mode normalises with the batch statistics and folds them into
/// the running estimates (unbiased variance, momentum [`BN_MOMENTUM`]).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &mut ParamStore, x: Var<'t>, train: bool) -> Result<Var<'t>, GradError> {
        let gamma = store.bind(tape, self.gamma);
        let beta = store.bind(tape, self.beta);
        if !train {
            let mean = store.buffer(self.running_mean).data().to_vec();
            let var = store.buffer(self.running_var).data().to_vec();
            let (y, _) = x.batchnorm(gamma, beta, NormStats::Fixed { mean: &mean, var: &var, eps: BN_EPS })?;
            return Ok(y);
        }
        let (y, stats) = x.batchnorm(gamma, beta, NormStats::Batch { eps: BN_EPS })?;
        if let Some(s) = stats {
            let correction = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            let rm = store.buffer_mut(self.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = store.buffer_mut(self.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
            }
        }
        Ok(y)
    }
}
