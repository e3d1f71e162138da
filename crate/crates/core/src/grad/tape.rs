use std::cell::RefCell;
use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::tensor::numel;
use super::{GradError, Tensor};

/// Derivative of the arctangent surrogate for the spike step function.
pub fn surrogate_grad(x: f64, alpha: f64) -> f64 {
    let z = PI * alpha * x / 2.0;
    alpha / (2.0 * (1.0 + z * z))
}

/// Smooth antiderivative of [`surrogate_grad`], a sigmoid-shaped curve
/// from 0 to 1 with value 1/2 at the origin.
pub fn surrogate_primitive(x: f64, alpha: f64) -> f64 {
    (PI * alpha * x / 2.0).atan() / PI + 0.5
}

/// Normalisation statistics a batch-norm call should use.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Normalise with the batch's own statistics.
    Batch { eps: f64 },
    /// Normalise with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-channel statistics observed by a batch-norm call in batch mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of elements each channel statistic was computed over.
    pub count: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    Sigmoid(usize),
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    Upsample { x: usize, factor: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor, inv_std: Vec<f64>, batch: bool },
    Heaviside { x: usize, threshold: f64, alpha: f64 },
    Or { a: usize, b: usize, soft: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow { x: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Ln(a) | Clamp(a, ..) | Sigmoid(a) | Reshape(a) | Permute(a, _) | Sum(a) | Mean(a) => {
                vec![*a]
            }
            MatMul { a, b, .. } | Or { a, b, .. } => vec![*a, *b],
            Linear { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            MaxPool2d { x, .. } | Upsample { x, .. } | Heaviside { x, .. } | Narrow { x, .. } => vec![*x],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and `backward` walks it once in reverse.
///
/// A *relaxed* tape replaces hard spikes by their smooth surrogate
/// primitive and the binary OR by `a + b - ab`; the recorded graph then
/// computes the exact gradient of a smooth function, which finite
/// differences can check.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    relaxed: bool,
    uid: u64,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(0);

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), GradError> {
    if a.shape() != b.shape() {
        return Err(GradError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(false)
    }

    pub fn relaxed() -> Self {
        Self::with_mode(true)
    }

    fn with_mode(relaxed: bool) -> Self {
        Self { nodes: RefCell::new(Vec::new()), relaxed, uid: NEXT_TAPE.fetch_add(1, Ordering::Relaxed) }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub(crate) fn handle(&self, id: usize) -> Var<'_> {
        assert!(id < self.len(), "node {id} is not on this tape");
        Var { tape: self, id }
    }

    pub fn is_relaxed(&self) -> bool {
        self.relaxed
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad, grad: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_raw(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Accumulated gradient of a leaf, if any has been propagated to it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Backpropagate from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), GradError> {
        let root = self.value(loss.id);
        if root.len() != 1 {
            return Err(GradError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.shape(), 1.0));
        let mut leaf_grads: Vec<(usize, Tensor)> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                for (parent, pg) in self.backprop(&nodes, node, &g)? {
                    if !nodes[parent].requires_grad {
                        continue;
                    }
                    match &mut grads[parent] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop(&self, nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>, GradError> {
        let val = |i: usize| -> &Tensor { &nodes[i].value };
        let wants = |i: usize| nodes[i].requires_grad;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, g.zip_map(val(*b), |g, y| g * y)), (*b, g.zip_map(val(*a), |g, x| g * x))],
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let da = g.zip_map(y, |g, y| g / y);
                let mut db = g.zip_map(x, |g, x| g * x);
                for (d, y) in db.data_mut().iter_mut().zip(y.data()) {
                    *d = -*d / (y * y);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Ln(a) => vec![(*a, g.zip_map(val(*a), |g, x| g / x))],
            Op::Clamp(a, lo, hi) => vec![(*a, g.zip_map(val(*a), |g, x| if x < *lo || x > *hi { 0.0 } else { g }))],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |g, y| g * y * (1.0 - y)))],
            Op::MatMul { a, b, batch, m, k, n } => {
                let (x, y) = (val(*a), val(*b));
                let mut res = Vec::new();
                if wants(*a) {
                    let yt = kernels::transpose_last2(*batch, *k, *n, y.data());
                    let d = kernels::bmm(*batch, *m, *n, *k, g.data(), &yt);
                    res.push((*a, Tensor::new(x.shape(), d)?));
                }
                if wants(*b) {
                    let xt = kernels::transpose_last2(*batch, *m, *k, x.data());
                    let d = kernels::bmm(*batch, *k, *m, *n, &xt, g.data());
                    res.push((*b, Tensor::new(y.shape(), d)?));
                }
                res
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                let mut res = Vec::new();
                if wants(*x) {
                    // dx = g (rows x out) * W (out x in)
                    let d = kernels::bmm(1, rows, fout, fin, g.data(), wv.data());
                    res.push((*x, Tensor::new(xv.shape(), d)?));
                }
                if wants(*w) {
                    let gt = kernels::transpose_last2(1, rows, fout, g.data());
                    let d = kernels::bmm(1, fout, rows, fin, &gt, xv.data());
                    res.push((*w, Tensor::new(wv.shape(), d)?));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; fout];
                    for r in 0..rows {
                        for (d, gv) in db.iter_mut().zip(&g.data()[r * fout..(r + 1) * fout]) {
                            *d += gv;
                        }
                    }
                    res.push((*b, Tensor::new(&[fout], db)?));
                }
                res
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let (dx, dw, db) = kernels::conv2d_backward(geom, xv.data(), wv.data(), g.data(), wants(*x));
                let mut res = vec![(*w, Tensor::new(wv.shape(), dw)?)];
                if let Some(dx) = dx {
                    res.push((*x, Tensor::new(xv.shape(), dx)?));
                }
                if let Some(b) = b {
                    res.push((*b, Tensor::new(&[geom.c_out], db)?));
                }
                res
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = Tensor::zeros(val(*x).shape());
                let dd = d.data_mut();
                for (gv, &i) in g.data().iter().zip(argmax) {
                    dd[i] += gv;
                }
                vec![(*x, d)]
            }
            Op::Upsample { x, factor } => {
                let xv = val(*x);
                let d = kernels::upsample_nearest_backward(xv.shape(), g.data(), *factor);
                vec![(*x, Tensor::new(xv.shape(), d)?)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let shape = xhat.shape();
                let c = shape[1];
                let gam = val(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                kernels::for_each_channel(shape, |i, ch| {
                    dgamma[ch] += g.data()[i] * xhat.data()[i];
                    dbeta[ch] += g.data()[i];
                });
                let mut res = vec![(*gamma, Tensor::new(&[c], dgamma.clone())?), (*beta, Tensor::new(&[c], dbeta.clone())?)];
                if wants(*x) {
                    let mut dx = Tensor::zeros(shape);
                    let count = (xhat.len() / c) as f64;
                    let dxd = dx.data_mut();
                    kernels::for_each_channel(shape, |i, ch| {
                        let dxhat = g.data()[i] * gam[ch];
                        dxd[i] = if *batch {
                            // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                            inv_std[ch] * (dxhat - gam[ch] * (dbeta[ch] + xhat.data()[i] * dgamma[ch]) / count)
                        } else {
                            inv_std[ch] * dxhat
                        };
                    });
                    res.push((*x, dx));
                }
                res
            }
            Op::Heaviside { x, threshold, alpha } => {
                vec![(*x, g.zip_map(val(*x), |g, v| g * surrogate_grad(v - threshold, *alpha)))]
            }
            Op::Or { a, b, soft } => {
                if *soft {
                    vec![(*a, g.zip_map(val(*b), |g, y| g * (1.0 - y))), (*b, g.zip_map(val(*a), |g, x| g * (1.0 - x)))]
                } else {
                    vec![(*a, g.clone()), (*b, g.clone())]
                }
            }
            Op::Reshape(a) => vec![(*a, g.reshaped(val(*a).shape())?)],
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, g.permute(&inv)?)]
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    res.push((p, g.narrow(*axis, start, len)?));
                    start += len;
                }
                res
            }
            Op::Narrow { x, axis, start } => {
                let xv = val(*x);
                let shape = xv.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let (dim, len) = (shape[*axis], g.shape()[*axis]);
                let mut d = Tensor::zeros(shape);
                let dd = d.data_mut();
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    dd[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, d)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let xv = val(*a);
                vec![(*a, Tensor::full(xv.shape(), g.item() / xv.len() as f64))]
            }
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>, GradError> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        check_same(name, &a, &b)?;
        Ok(self.tape.push(a.zip_map(&b, f), op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.push(self.value().map(|v| v * s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.tape.push(self.value().map(|v| v + s), Op::AddScalar(self.id))
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.push(self.value().map(f64::ln), Op::Ln(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.push(self.value().map(|v| v.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.push(self.value().map(|v| 1.0 / (1.0 + (-v).exp())), Op::Sigmoid(self.id))
    }

    /// Matrix product of 2-D `(m, k) x (k, n)` or batched 3-D
    /// `(b, m, k) x (b, k, n)` operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]]),
            _ => return Err(GradError::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let data = kernels::bmm(batch, m, k, n, a.data(), b.data());
        Ok(self.tape.push(Tensor::new(&out_shape, data)?, Op::MatMul { a: self.id, b: other.id, batch, m, k, n }))
    }

    /// Swap the trailing two axes of a 3-D tensor.
    pub fn transpose_last(self) -> Result<Var<'t>, GradError> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(GradError::shape("transpose_last", format!("{shape:?} is not 3-D")));
        }
        self.permute(&[0, 2, 1])
    }

    /// `x W^T + b` for `x` of shape `(rows, in)` and `W` of shape `(out, in)`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>, GradError> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(GradError::shape("linear", format!("input {sx:?} with weight {sw:?}")));
        }
        let (rows, fin, fout) = (sx[0], sx[1], sw[0]);
        let wt = kernels::transpose_last2(1, fout, fin, w.data());
        let mut data = kernels::bmm(1, rows, fin, fout, x.data(), &wt);
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [fout] {
                return Err(GradError::shape("linear", format!("bias {:?} for {fout} outputs", bv.shape())));
            }
            for r in 0..rows {
                for (d, bb) in data[r * fout..(r + 1) * fout].iter_mut().zip(bv.data()) {
                    *d += bb;
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(&[rows, fout], data)?,
            Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) },
        ))
    }

    /// Stride-1 2-D convolution of NCHW input with an `(out, in, k, k)` kernel
    /// and symmetric zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, pad: usize) -> Result<Var<'t>, GradError> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(GradError::shape("conv2d", format!("input {sx:?} with kernel {sw:?}, pad {pad}")));
        }
        let geom = ConvGeom { n: sx[0], c_in: sx[1], h: sx[2], w: sx[3], c_out: sw[0], k: sw[2], pad };
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [geom.c_out] {
                return Err(GradError::shape("conv2d", format!("bias {:?} for {} channels", bv.shape(), geom.c_out)));
            }
        }
        let data = kernels::conv2d_forward(&geom, x.data(), w.data(), bv.as_ref().map(|b| b.data()));
        let shape = [geom.n, geom.c_out, geom.out_h(), geom.out_w()];
        Ok(self.tape.push(
            Tensor::new(&shape, data)?,
            Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom },
        ))
    }

    /// 2x2 max pooling with stride 2 over NCHW input.
    pub fn maxpool2d(self) -> Result<Var<'t>, GradError> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(GradError::shape("maxpool2d", format!("{s:?}")));
        }
        let (data, argmax) = kernels::maxpool2x2(s, x.data());
        let shape = [s[0], s[1], s[2] / 2, s[3] / 2];
        Ok(self.tape.push(Tensor::new(&shape, data)?, Op::MaxPool2d { x: self.id, argmax }))
    }

    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>, GradError> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || factor == 0 {
            return Err(GradError::shape("nearest_upsample2d", format!("{s:?} by {factor}")));
        }
        let data = kernels::upsample_nearest(s, x.data(), factor);
        let shape = [s[0], s[1], s[2] * factor, s[3] * factor];
        Ok(self.tape.push(Tensor::new(&shape, data)?, Op::Upsample { x: self.id, factor }))
    }

    /// Per-channel normalisation over every axis except axis 1, followed by
    /// the affine map `gamma * xhat + beta`. Returns the batch statistics
    /// when normalising with them.
    pub fn batchnorm(self, gamma: Var<'t>, beta: Var<'t>, stats: NormStats<'_>) -> Result<(Var<'t>, Option<BatchStats>), GradError> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(GradError::shape("batchnorm", format!("{s:?} has no channel axis")));
        }
        let c = s[1];
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(GradError::shape("batchnorm", format!("input {s:?} with affine {:?}/{:?}", gv.shape(), bv.shape())));
        }
        let (mean, var, eps, batch) = match stats {
            NormStats::Batch { eps } => {
                let (m, v) = kernels::channel_stats(s, x.data());
                (m, v, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(GradError::shape("batchnorm", format!("{} running stats for {c} channels", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        {
            let (xh, o) = (xhat.data_mut(), out.data_mut());
            kernels::for_each_channel(s, |i, ch| {
                xh[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                o[i] = gv.data()[ch] * xh[i] + bv.data()[ch];
            });
        }
        let count = x.len() / c;
        let observed = batch.then(|| BatchStats { mean, var, count });
        let v = self.tape.push(out, Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, batch });
        Ok((v, observed))
    }

    /// Spike function `1[x >= threshold]` whose backward pass uses the
    /// arctangent surrogate derivative with width `alpha`. On a relaxed tape
    /// the forward value is the surrogate primitive instead.
    pub fn heaviside(self, threshold: f64, alpha: f64) -> Var<'t> {
        let x = self.value();
        let out = if self.tape.relaxed {
            x.map(|v| surrogate_primitive(v - threshold, alpha))
        } else {
            x.map(|v| if v >= threshold { 1.0 } else { 0.0 })
        };
        self.tape.push(out, Op::Heaviside { x: self.id, threshold, alpha })
    }

    /// Element-wise OR of binary tensors; the backward pass hands the
    /// upstream gradient to both operands unchanged.
    pub fn or(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        check_same("elementwise_or", &a, &b)?;
        let soft = self.tape.relaxed;
        if soft {
            return Ok(self.tape.push(a.zip_map(&b, |x, y| x + y - x * y), Op::Or { a: self.id, b: other.id, soft }));
        }
        if cfg!(debug_assertions) && !(a.is_binary() && b.is_binary()) {
            return Err(GradError::NonBinary("elementwise_or"));
        }
        Ok(self.tape.push(a.zip_map(&b, f64::max), Op::Or { a: self.id, b: other.id, soft }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, GradError> {
        let v = self.value().reshaped(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>, GradError> {
        let v = self.value().permute(perm)?;
        Ok(self.tape.push(v, Op::Permute(self.id, perm.to_vec())))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, GradError> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.tape.push(v, Op::Narrow { x: self.id, axis, start }))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, GradError> {
        let first = parts.first().ok_or_else(|| GradError::shape("concat", "no inputs".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat(&refs, axis)?;
        Ok(first.tape.push(v, Op::Concat(parts.iter().map(|p| p.id).collect(), axis)))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let s = self.value().mean();
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Same value, cut off from the graph.
    pub fn detach(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.leaf(v, false)
    }
}
