//! Recurrent spiking transformer for salient-object detection.
//!
//! Data flow for a `(B, 1, H, W)` input and `T` steps, every stage laid out
//! `(T * B, C, h, w)`:
//!
//! ```text
//! encoder  4 x CBS+pool     F1 (D/8, H/2) .. F4 (D, H/16)
//! RFA      rfa_blocks x     E -> O, same shape as F4
//! refine   up, CBS, fuse F3, up, CBS, fuse F2, CBS -> (D, H/4)
//! head     1x1 conv, sigmoid, nearest x4 -> (1, H, W)
//! ```
//!
//! Every tensor handed from one stage to the next is binary unless the
//! residual operator is `add`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{BatchNorm, Conv2d, GradError, Linear, ParamStore, Tape, Tensor, Var};
use crate::neuro::{dims4, Cbs, Ctx, LifParams, NeuroError, NeuronState, Trace};
use crate::spikeio::SpikeRepr;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input {height}x{width} is not divisible by 16")]
    Indivisible { height: usize, width: usize },
    #[error(transparent)]
    Neuron(#[from] NeuroError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Source of the key/value branch of a recurrent block at step `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentMode {
    /// Step `t`.
    Vanilla,
    /// Step `t - 1`; the first step uses itself.
    Forward,
    /// Step `t + 1`; the last step uses itself.
    #[default]
    Reverse,
}

/// Operator joining a residual branch with its shortcut.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualOp {
    #[default]
    Or,
    Add,
    /// Channel concatenation followed by a 1x1 CBS back to the input width.
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One step per representation, potentials carried across calls.
    SingleStep,
    /// Each representation repeated for `T` steps from a fresh state.
    #[default]
    MultiStep,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SingleStep => "single",
            Mode::MultiStep => "multi",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" | "single_step" => Ok(Mode::SingleStep),
            "multi" | "multi_step" => Ok(Mode::MultiStep),
            _ => Err(format!("unknown mode {s:?}, expected single or multi")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "D")]
    pub dim: usize,
    pub heads: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub rfa_blocks: usize,
    pub recurrent_mode: RecurrentMode,
    pub residual_op: ResidualOp,
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub surrogate_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let lif = LifParams::default();
        Self {
            dim: 128,
            heads: 8,
            steps: 5,
            rfa_blocks: 6,
            recurrent_mode: RecurrentMode::Reverse,
            residual_op: ResidualOp::Or,
            tau: lif.tau,
            v_th: lif.v_th,
            v_reset: lif.v_reset,
            surrogate_alpha: lif.alpha,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!("D = {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim < 8 || self.dim % 8 != 0 {
            return Err(ModelError::Config(format!("D = {} must be a positive multiple of 8", self.dim)));
        }
        if self.steps == 0 {
            return Err(ModelError::Config("T must be at least 1".into()));
        }
        self.lif().validate()?;
        Ok(())
    }

    pub fn lif(&self) -> LifParams {
        LifParams { tau: self.tau, v_th: self.v_th, v_reset: self.v_reset, alpha: self.surrogate_alpha }
    }

    /// Attention scale `sqrt(n / D)`.
    pub fn scale(&self) -> f64 {
        (self.heads as f64 / self.dim as f64).sqrt()
    }

    pub fn steps_for(&self, mode: Mode) -> usize {
        match mode {
            Mode::SingleStep => 1,
            Mode::MultiStep => self.steps,
        }
    }
}

/// Residual join, see [`ResidualOp`].
#[derive(Clone, Debug)]
pub struct Fuse {
    pub op: ResidualOp,
    proj: Option<Cbs>,
}

impl Fuse {
    fn new(store: &mut ParamStore, name: &str, op: ResidualOp, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = (op == ResidualOp::Concat).then(|| Cbs::new(store, &format!("{name}.proj"), 2 * channels, channels, 1, false, rng));
        Self { op, proj }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, shortcut: Var<'t>, branch: Var<'t>) -> Result<Var<'t>, GradError> {
        match self.op {
            ResidualOp::Or => shortcut.or(branch),
            ResidualOp::Add => shortcut.add(branch),
            ResidualOp::Concat => {
                let cat = Var::concat(&[shortcut, branch], 1)?;
                self.proj.as_ref().expect("concat projection").forward(ctx, cat)
            }
        }
    }
}

/// Token-wise `LIF(BN(Linear(x)))` on `(rows, D)` tokens.
#[derive(Clone, Debug)]
struct SpikingLinear {
    name: String,
    linear: Linear,
    bn: BatchNorm,
}

impl SpikingLinear {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            name: name.to_owned(),
            linear: Linear::new(store, &format!("{name}.linear"), d, d, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), d),
        }
    }

    fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>, GradError> {
        let rows = x.shape()[0] / ctx.steps;
        let (din, dout) = (self.linear.d_in as u64, self.linear.d_out as u64);
        ctx.record_synapse(&self.name, x, false, dout, rows as u64 * din * dout);
        let y = self.linear.forward(ctx.tape, ctx.store, x)?;
        let y = self.bn.forward(ctx.tape, ctx.store, y, ctx.train)?;
        ctx.lif(y)
    }
}

fn to_tokens<'t>(map: Var<'t>) -> Result<Var<'t>, GradError> {
    let [r, d, h, w] = dims4(map)?;
    map.permute(&[0, 2, 3, 1])?.reshape(&[r * h * w, d])
}

fn to_map<'t>(tokens: Var<'t>, r: usize, h: usize, w: usize) -> Result<Var<'t>, GradError> {
    let d = tokens.shape()[1];
    tokens.reshape(&[r, h, w, d])?.permute(&[0, 3, 1, 2])
}

fn split_heads<'t>(tokens: Var<'t>, r: usize, heads: usize) -> Result<Var<'t>, GradError> {
    let (rows, d) = (tokens.shape()[0], tokens.shape()[1]);
    let n = rows / r;
    tokens.reshape(&[r, n, heads, d / heads])?.permute(&[0, 2, 1, 3])?.reshape(&[r * heads, n, d / heads])
}

fn merge_heads<'t>(x: Var<'t>, r: usize, heads: usize) -> Result<Var<'t>, GradError> {
    let (n, dh) = (x.shape()[1], x.shape()[2]);
    x.reshape(&[r, heads, n, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[r * n, heads * dh])
}

/// Rows of step `t` replaced by the rows the recurrent mode pairs them with.
fn paired_steps<'t>(x: Var<'t>, steps: usize, mode: RecurrentMode) -> Result<Var<'t>, GradError> {
    if steps == 1 || mode == RecurrentMode::Vanilla {
        return Ok(x);
    }
    let b = x.shape()[0] / steps;
    match mode {
        RecurrentMode::Reverse => Var::concat(&[x.narrow(0, b, (steps - 1) * b)?, x.narrow(0, (steps - 1) * b, b)?], 0),
        RecurrentMode::Forward => Var::concat(&[x.narrow(0, 0, b)?, x.narrow(0, 0, (steps - 1) * b)?], 0),
        RecurrentMode::Vanilla => unreachable!(),
    }
}

/// Spiking self-attention `LIF(Q (K^T V) s)` on head-split binary tensors
/// of shape `(R * n, N, d)`.
pub fn ssa<'t>(ctx: &mut Ctx<'t, '_>, q: Var<'t>, k: Var<'t>, v: Var<'t>, scale: f64) -> Result<Var<'t>, GradError> {
    let (rows, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(GradError::Shape { op: "ssa", detail: format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()) });
    }
    let dense = (rows / ctx.steps * n * d * d) as u64;
    ctx.record_synapse("ssa.kv", k, false, d as u64, dense);
    let kv = k.transpose_last()?.matmul(v)?;
    ctx.record_synapse("ssa.qkv", q, false, d as u64, dense);
    let a = q.matmul(kv)?.scale(scale);
    ctx.lif(a)
}

/// One recurrent feature aggregation block.
#[derive(Clone, Debug)]
pub struct RfaBlock {
    name: String,
    q: SpikingLinear,
    k: SpikingLinear,
    v: SpikingLinear,
    proj: SpikingLinear,
    z_fuse: Fuse,
    mlp: [Cbs; 2],
    o_fuse: Fuse,
}

impl RfaBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        Self {
            name: name.to_owned(),
            q: SpikingLinear::new(store, &format!("{name}.q"), d, rng),
            k: SpikingLinear::new(store, &format!("{name}.k"), d, rng),
            v: SpikingLinear::new(store, &format!("{name}.v"), d, rng),
            proj: SpikingLinear::new(store, &format!("{name}.proj"), d, rng),
            z_fuse: Fuse::new(store, &format!("{name}.z"), cfg.residual_op, d, rng),
            mlp: [Cbs::new(store, &format!("{name}.mlp1"), d, d, 3, false, rng), Cbs::new(store, &format!("{name}.mlp2"), d, d, 3, false, rng)],
            o_fuse: Fuse::new(store, &format!("{name}.o"), cfg.residual_op, d, rng),
        }
    }

    /// `e` is `(T * B, D, h, w)`; returns `O` of the same shape.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, cfg: &ModelConfig, e: Var<'t>) -> Result<Var<'t>, GradError> {
        let [r, _, h, w] = dims4(e)?;
        let next = paired_steps(e, ctx.steps, cfg.recurrent_mode)?;
        let (e_tok, next_tok) = (to_tokens(e)?, to_tokens(next)?);
        let q = self.q.forward(ctx, e_tok)?;
        let k = self.k.forward(ctx, next_tok)?;
        let v = self.v.forward(ctx, next_tok)?;
        let heads = cfg.heads;
        let (qh, kh, vh) = (split_heads(q, r, heads)?, split_heads(k, r, heads)?, split_heads(v, r, heads)?);
        let a = ssa(ctx, qh, kh, vh, cfg.scale())?;
        let p = self.proj.forward(ctx, merge_heads(a, r, heads)?)?;
        let z = self.z_fuse.forward(ctx, e, to_map(p, r, h, w)?)?;
        ctx.record(&format!("{}.z", self.name), z);
        let m = self.mlp[0].forward(ctx, z)?;
        let m = self.mlp[1].forward(ctx, m)?;
        let o = self.o_fuse.forward(ctx, e, m)?;
        ctx.record(&format!("{}.o", self.name), o);
        Ok(o)
    }
}

#[derive(Clone, Debug)]
struct Refine {
    up3: Cbs,
    fuse3: Fuse,
    up2: Cbs,
    fuse2: Fuse,
    out: Cbs,
}

impl Refine {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        Self {
            up3: Cbs::new(store, "refine.up3", d, d / 2, 3, false, rng),
            fuse3: Fuse::new(store, "refine.fuse3", cfg.residual_op, d / 2, rng),
            up2: Cbs::new(store, "refine.up2", d / 2, d / 4, 3, false, rng),
            fuse2: Fuse::new(store, "refine.fuse2", cfg.residual_op, d / 4, rng),
            out: Cbs::new(store, "refine.out", d / 4, d, 3, false, rng),
        }
    }

    fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, f2: Var<'t>, f3: Var<'t>, f: Var<'t>) -> Result<Var<'t>, GradError> {
        let x = self.up3.forward(ctx, f.upsample_nearest(2)?)?;
        let x = self.fuse3.forward(ctx, f3, x)?;
        ctx.record("refine.s3", x);
        let x = self.up2.forward(ctx, x.upsample_nearest(2)?)?;
        let x = self.fuse2.forward(ctx, f2, x)?;
        ctx.record("refine.s2", x);
        let x = self.out.forward(ctx, x)?;
        ctx.record("refine.out", x);
        Ok(x)
    }
}

/// Model parameters and layer wiring.
#[derive(Clone, Debug)]
pub struct Rst {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: [Cbs; 4],
    blocks: Vec<RfaBlock>,
    refine: Refine,
    head: Conv2d,
}

/// Intermediate tensors of one forward pass.
pub struct Forward<'t> {
    pub pyramid: [Var<'t>; 4],
    pub features: Var<'t>,
    pub refined: Var<'t>,
    /// Saliency maps `(T * B, 1, H, W)`.
    pub maps: Var<'t>,
    pub steps: usize,
}

impl<'t> Forward<'t> {
    /// Map of step `t`, `(B, 1, H, W)`.
    pub fn step_map(&self, t: usize) -> Result<Var<'t>, GradError> {
        let b = self.maps.shape()[0] / self.steps;
        self.maps.narrow(0, t * b, b)
    }

    pub fn step_maps(&self) -> Result<Vec<Var<'t>>, GradError> {
        (0..self.steps).map(|t| self.step_map(t)).collect()
    }
}

impl Rst {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let widths = [1, d / 8, d / 4, d / 2, d];
        let encoder = std::array::from_fn(|i| Cbs::new(&mut store, &format!("encoder.{}", i + 1), widths[i], widths[i + 1], 3, true, &mut rng));
        let blocks = (0..cfg.rfa_blocks).map(|i| RfaBlock::new(&mut store, &format!("rfa.{i}"), &cfg, &mut rng)).collect();
        let refine = Refine::new(&mut store, &cfg, &mut rng);
        let head = Conv2d::new(&mut store, "head", d, 1, 1, true, &mut rng);
        Ok(Self { cfg, store, encoder, blocks, refine, head })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Full forward of a `(B, 1, H, W)` input over `steps` time steps.
    ///
    /// `state` holds the potentials every LIF layer starts from and receives
    /// the ones it ends with; pass a fresh state for multi-step inference.
    pub fn forward<'t>(&mut self, tape: &'t Tape, input: Var<'t>, steps: usize, train: bool, state: &mut NeuronState, trace: Option<&mut Trace>) -> Result<Forward<'t>, ModelError> {
        let [_, c, h, w] = dims4(input)?;
        if c != 1 {
            return Err(ModelError::Config(format!("expected one input channel, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(ModelError::Indivisible { height: h, width: w });
        }
        state.rewind();
        let mut ctx = Ctx { tape, store: &mut self.store, lif: self.cfg.lif(), steps, train, state, trace };
        let f1 = self.encoder[0].forward_repeated(&mut ctx, input)?;
        ctx.record("encoder.f1", f1);
        let f2 = self.encoder[1].forward(&mut ctx, f1)?;
        ctx.record("encoder.f2", f2);
        let f3 = self.encoder[2].forward(&mut ctx, f2)?;
        ctx.record("encoder.f3", f3);
        let f4 = self.encoder[3].forward(&mut ctx, f3)?;
        ctx.record("encoder.f4", f4);
        let mut e = f4;
        for block in &self.blocks {
            e = block.forward(&mut ctx, &self.cfg, e)?;
        }
        let refined = self.refine.forward(&mut ctx, f2, f3, e)?;
        let [_, _, rh, rw] = dims4(refined)?;
        let samples = ctx.batch(refined) as u64;
        ctx.record_synapse("head", refined, false, self.head.fan_out(), self.head.dense_ops(rh, rw) * samples);
        let logits = self.head.forward(tape, &mut self.store, refined)?;
        let maps = logits.sigmoid().upsample_nearest(4)?;
        Ok(Forward { pyramid: [f1, f2, f3, f4], features: e, refined, maps, steps })
    }

    /// Inference on a batch of representations: per-step maps `(B, 1, H, W)`.
    pub fn predict(&mut self, reprs: &[&SpikeRepr], mode: Mode, state: &mut NeuronState, trace: Option<&mut Trace>) -> Result<Vec<Tensor>, ModelError> {
        let tape = Tape::new();
        let input = tape.constant(batch_input(reprs)?);
        let steps = self.cfg.steps_for(mode);
        let out = self.forward(&tape, input, steps, false, state, trace)?;
        let maps = out.step_maps()?.into_iter().map(|m| (*m.value()).clone()).collect();
        self.store.release(&tape);
        Ok(maps)
    }
}

/// Stack representations into a `(B, 1, H, W)` input scaled to `[0, 1]`.
pub fn batch_input(reprs: &[&SpikeRepr]) -> Result<Tensor, ModelError> {
    let first = reprs.first().ok_or_else(|| ModelError::Config("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(reprs.len() * h * w);
    for r in reprs {
        if (r.height, r.width) != (h, w) {
            return Err(ModelError::Config(format!("mixed resolutions {}x{} and {}x{}", h, w, r.height, r.width)));
        }
        data.extend(r.values.iter().map(|v| v / r.max_gray));
    }
    Ok(Tensor::new(&[reprs.len(), 1, h, w], data)?)
}
