//! Leaky integrate-and-fire neurons and the conv/BN/spike (CBS) block.
//!
//! Multi-step tensors are laid out `(T * B, ...)` with the time step as the
//! outermost factor of axis 0: rows `t * B .. (t + 1) * B` belong to step `t`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{BatchNorm, Conv2d, GradError, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NeuroError {
    #[error("membrane time constant must be positive, got {0}")]
    Tau(f64),
    #[error("surrogate width must be positive, got {0}")]
    Alpha(f64),
    #[error("reset potential {v_reset} must lie below threshold {v_th}")]
    Reset { v_reset: f64, v_th: f64 },
    #[error("input shape {got:?} does not match neuron state {want:?}")]
    Shape { got: Vec<usize>, want: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    /// Width of the arctangent surrogate gradient.
    pub alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { tau: 2.0, v_th: 1.0, v_reset: 0.0, alpha: 2.0 }
    }
}

impl LifParams {
    pub fn new(tau: f64, v_th: f64, v_reset: f64, alpha: f64) -> Result<Self, NeuroError> {
        let p = Self { tau, v_th, v_reset, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), NeuroError> {
        if !(self.tau > 0.0) {
            return Err(NeuroError::Tau(self.tau));
        }
        if !(self.alpha > 0.0) {
            return Err(NeuroError::Alpha(self.alpha));
        }
        if !(self.v_reset < self.v_th) {
            return Err(NeuroError::Reset { v_reset: self.v_reset, v_th: self.v_th });
        }
        Ok(())
    }

    /// Charge: `H = V + (X - (V - V_reset)) / tau`.
    pub fn charge(&self, v: f64, x: f64) -> f64 {
        v + (x - (v - self.v_reset)) * (1.0 / self.tau)
    }
}

/// Membrane potentials of one layer, updated in place by [`lif_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub params: LifParams,
    pub v: Tensor,
}

impl LifState {
    pub fn new(params: LifParams, shape: &[usize]) -> Result<Self, NeuroError> {
        params.validate()?;
        Ok(Self { params, v: Tensor::full(shape, params.v_reset) })
    }
}

/// One LIF update; returns the binary spike tensor.
pub fn lif_step(state: &mut LifState, x: &Tensor) -> Result<Tensor, NeuroError> {
    if x.shape() != state.v.shape() {
        return Err(NeuroError::Shape { got: x.shape().to_vec(), want: state.v.shape().to_vec() });
    }
    let p = state.params;
    let mut spikes = Tensor::zeros(x.shape());
    for ((v, &xi), s) in state.v.data_mut().iter_mut().zip(x.data()).zip(spikes.data_mut()) {
        let h = p.charge(*v, xi);
        *s = if h >= p.v_th { 1.0 } else { 0.0 };
        *v = h * (1.0 - *s) + p.v_reset * *s;
    }
    Ok(spikes)
}

pub fn lif_reset(state: &mut LifState) {
    let r = state.params.v_reset;
    state.v.data_mut().fill(r);
}

/// Differentiable LIF update. `v` is the previous potential, `None` meaning
/// the reset potential. Returns `(spikes, new potential)`.
///
/// The reset multiplies by a detached copy of the spikes, so the gradient
/// reaches `H` only through the `(1 - S)` factor and the spike function. On
/// a relaxed tape the spikes are not detached.
pub fn lif_step_var<'t>(p: &LifParams, v: Option<Var<'t>>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>), GradError> {
    let h = match v {
        None => x.scale(1.0 / p.tau).add_scalar(p.v_reset),
        Some(v) => v.add(x.sub(v.add_scalar(-p.v_reset))?.scale(1.0 / p.tau))?,
    };
    let s = h.heaviside(p.v_th, p.alpha);
    let gate = if x.tape().is_relaxed() { s } else { s.detach() };
    let mut v_new = h.mul(gate.one_minus())?;
    if p.v_reset != 0.0 {
        v_new = v_new.add(gate.scale(p.v_reset))?;
    }
    Ok((s, v_new))
}

/// Per-layer membrane potentials carried between forward calls.
///
/// Layers claim slots in call order; [`NeuronState::rewind`] restarts the
/// cursor before each forward pass so that slots line up across calls.
#[derive(Clone, Debug, Default)]
pub struct NeuronState {
    slots: Vec<Option<Tensor>>,
    cursor: usize,
}

impl NeuronState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forget every potential.
    pub fn reset(&mut self) {
        self.slots.clear();
        self.cursor = 0;
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    fn claim(&mut self) -> usize {
        if self.cursor == self.slots.len() {
            self.slots.push(None);
        }
        self.cursor += 1;
        self.cursor - 1
    }
}

/// Tensor crossing a module boundary, as recorded by a [`Trace`].
#[derive(Clone, Debug)]
pub struct Boundary {
    pub name: String,
    pub shape: Vec<usize>,
    pub binary: bool,
    pub nonzero: usize,
    pub tensor: Option<Tensor>,
}

/// Input activity of one synaptic layer during a forward pass.
#[derive(Clone, Debug)]
pub struct SynapseCount {
    pub name: String,
    /// Real-valued input: each non-zero input costs multiply-accumulates.
    pub analog: bool,
    pub input_nonzero: u64,
    /// Targets reached by one input element.
    pub fan_out: u64,
    /// Multiply-accumulates of one dense, single-step application.
    pub dense_macs: u64,
    pub input: Option<Tensor>,
}

impl SynapseCount {
    /// Operations actually triggered by the recorded input.
    pub fn ops(&self) -> u64 {
        self.input_nonzero * self.fan_out
    }
}

/// Optional instrumentation of a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Keep a copy of every recorded tensor.
    pub keep_tensors: bool,
    pub boundaries: Vec<Boundary>,
    pub synapses: Vec<SynapseCount>,
}

impl Trace {
    pub fn keeping_tensors() -> Self {
        Self { keep_tensors: true, ..Self::default() }
    }

    pub fn all_binary(&self) -> bool {
        self.boundaries.iter().all(|b| b.binary)
    }
}

/// Everything a forward pass threads through the layers.
pub struct Ctx<'t, 'a> {
    pub tape: &'t Tape,
    pub store: &'a mut ParamStore,
    pub lif: LifParams,
    /// Time steps folded into axis 0.
    pub steps: usize,
    pub train: bool,
    pub state: &'a mut NeuronState,
    pub trace: Option<&'a mut Trace>,
}

impl<'t> Ctx<'t, '_> {
    /// Multi-step LIF over the `steps` chunks of axis 0, starting from this
    /// layer's carried potential.
    pub fn lif(&mut self, x: Var<'t>) -> Result<Var<'t>, GradError> {
        let slot = self.state.claim();
        let rows = x.shape()[0];
        if rows % self.steps != 0 {
            return Err(GradError::Shape { op: "lif", detail: format!("axis 0 of {:?} is not a multiple of {} steps", x.shape(), self.steps) });
        }
        let b = rows / self.steps;
        let mut v = match self.state.slots[slot].take() {
            Some(t) if t.shape()[0] == b && t.shape()[1..] == x.shape()[1..] => Some(self.tape.constant(t)),
            _ => None,
        };
        let mut out = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            let xt = if self.steps == 1 { x } else { x.narrow(0, t * b, b)? };
            let (s, v_new) = lif_step_var(&self.lif, v, xt)?;
            out.push(s);
            v = Some(v_new);
        }
        self.state.slots[slot] = v.map(|v| (*v.value()).clone());
        if out.len() == 1 {
            Ok(out[0])
        } else {
            Var::concat(&out, 0)
        }
    }

    pub fn record(&mut self, name: &str, x: Var<'t>) {
        if let Some(trace) = self.trace.as_deref_mut() {
            let v = x.value();
            trace.boundaries.push(Boundary {
                name: name.to_owned(),
                shape: v.shape().to_vec(),
                binary: v.is_binary(),
                nonzero: v.count_nonzero(),
                tensor: trace.keep_tensors.then(|| (*v).clone()),
            });
        }
    }

    pub fn record_synapse(&mut self, name: &str, input: Var<'t>, analog: bool, fan_out: u64, dense_macs: u64) {
        if let Some(trace) = self.trace.as_deref_mut() {
            let v = input.value();
            trace.synapses.push(SynapseCount {
                name: name.to_owned(),
                analog,
                input_nonzero: v.count_nonzero() as u64,
                fan_out,
                dense_macs,
                input: trace.keep_tensors.then(|| (*v).clone()),
            });
        }
    }

    pub fn batch(&self, x: Var<'t>) -> usize {
        x.shape()[0] / self.steps
    }
}

/// `MaxPool(LIF(BN(Conv3x3(x))))`, pooling optional.
#[derive(Clone, Debug)]
pub struct Cbs {
    pub name: String,
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub pool: bool,
}

impl Cbs {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, pool: bool, rng: &mut impl Rng) -> Self {
        Self {
            name: name.to_owned(),
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, kernel, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
            pool,
        }
    }

    /// `x` is `(T * B, C_in, H, W)`.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>, GradError> {
        let [_, _, h, w] = dims4(x)?;
        let samples = ctx.batch(x) as u64;
        ctx.record_synapse(&self.name, x, false, self.conv.fan_out(), self.conv.dense_ops(h, w) * samples);
        let y = self.conv.forward(ctx.tape, ctx.store, x)?;
        self.finish(ctx, y)
    }

    /// Forward for an input repeated over every time step: `x` is
    /// `(B, C_in, H, W)`; the convolution runs once and its output is tiled.
    pub fn forward_repeated<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>, GradError> {
        let [b, _, h, w] = dims4(x)?;
        ctx.record_synapse(&self.name, x, true, self.conv.fan_out(), self.conv.dense_ops(h, w) * b as u64);
        let y = self.conv.forward(ctx.tape, ctx.store, x)?;
        let y = if ctx.steps == 1 { y } else { Var::concat(&vec![y; ctx.steps], 0)? };
        self.finish(ctx, y)
    }

    fn finish<'t>(&self, ctx: &mut Ctx<'t, '_>, y: Var<'t>) -> Result<Var<'t>, GradError> {
        let y = self.bn.forward(ctx.tape, ctx.store, y, ctx.train)?;
        let s = ctx.lif(y)?;
        if self.pool {
            s.maxpool2d()
        } else {
            Ok(s)
        }
    }
}

pub(crate) fn dims4(x: Var<'_>) -> Result<[usize; 4], GradError> {
    let s = x.shape();
    s.as_slice().try_into().map_err(|_| GradError::Shape { op: "cbs", detail: format!("expected a 4-d input, got {s:?}") })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(v0: f64) -> LifState {
        let mut s = LifState::new(LifParams::default(), &[1]).unwrap();
        s.v.data_mut()[0] = v0;
        s
    }

    #[test]
    fn lif_examples() {
        let mut s = scalar_state(0.0);
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        assert_eq!(lif_step(&mut s, &x).unwrap().data(), &[0.0]);
        assert_eq!(s.v.data(), &[0.5]);
        assert_eq!(lif_step(&mut s, &x).unwrap().data(), &[0.0]);
        assert_eq!(s.v.data(), &[0.75]);

        let mut s = scalar_state(0.0);
        let spikes = lif_step(&mut s, &Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
        assert_eq!((spikes.data(), s.v.data()), (&[1.0][..], &[0.0][..]));
    }

    #[test]
    fn reset_behaviour() {
        let fresh = LifState::new(LifParams::default(), &[3]).unwrap();
        let mut s = fresh.clone();
        lif_step(&mut s, &Tensor::new(&[3], vec![3.0, 1.0, 0.2]).unwrap()).unwrap();
        lif_reset(&mut s);
        assert_eq!(s, fresh);
        lif_reset(&mut s);
        assert_eq!(s, fresh);
        assert_eq!(lif_step(&mut s, &Tensor::zeros(&[3])).unwrap().count_nonzero(), 0);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(matches!(LifParams::new(0.0, 1.0, 0.0, 2.0), Err(NeuroError::Tau(_))));
        assert!(matches!(LifParams::new(-1.0, 1.0, 0.0, 2.0), Err(NeuroError::Tau(_))));
        assert!(LifParams::new(2.0, 1.0, 0.0, 0.0).is_err());
        assert!(LifParams::new(2.0, 1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = LifState::new(LifParams::default(), &[2, 2]).unwrap();
        assert!(matches!(lif_step(&mut s, &Tensor::zeros(&[4])), Err(NeuroError::Shape { .. })));
    }

    #[test]
    fn graph_lif_matches_plain_lif() {
        let p = LifParams { tau: 1.7, v_th: 0.8, v_reset: -0.3, alpha: 2.0 };
        let xs = [vec![0.4, 2.0, -1.0], vec![0.9, 0.1, 3.0], vec![0.0, 0.7, 0.7]];
        let mut plain = LifState::new(p, &[3]).unwrap();
        let tape = Tape::new();
        let mut v = None;
        for x in &xs {
            let xt = Tensor::new(&[3], x.clone()).unwrap();
            let want = lif_step(&mut plain, &xt).unwrap();
            let (s, v_new) = lif_step_var(&p, v, tape.constant(xt)).unwrap();
            assert_eq!(*s.value(), want);
            assert_eq!(*v_new.value(), plain.v);
            v = Some(v_new);
        }
    }
}
