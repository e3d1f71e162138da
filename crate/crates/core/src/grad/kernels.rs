//! Numeric kernels behind the differentiable ops. Plain loops over
//! row-major buffers; all reductions run in a fixed order.

/// Geometry of a stride-1 square-kernel convolution over NCHW data.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    /// Valid output range along one axis for kernel tap `t`: output index
    /// `o` reads input `o + t - pad`.
    fn span(&self, tap: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(tap);
        let hi = (in_len + self.pad).saturating_sub(tap).min(out_len);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.n * g.c_out * oh * ow];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let plane = &mut out[(n * g.c_out + co) * oh * ow..][..oh * ow];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.c_in {
                let src = &input[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.k {
                    let (y0, y1) = g.span(ky, g.h, oh);
                    for kx in 0..g.k {
                        let wv = weight[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.span(kx, g.w, ow);
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let dst = &mut plane[y * ow + x0..y * ow + x1];
                            let row = &src[iy * g.w + x0 + kx - g.pad..][..x1 - x0];
                            for (d, s) in dst.iter_mut().zip(row) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (d_input, d_weight, d_bias) for the given upstream gradient.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut din = need_input.then(|| vec![0.0; input.len()]);
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.c_out];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let gplane = &dout[(n * g.c_out + co) * oh * ow..][..oh * ow];
            db[co] += gplane.iter().sum::<f64>();
            for ci in 0..g.c_in {
                let in_off = (n * g.c_in + ci) * g.h * g.w;
                let src = &input[in_off..in_off + g.h * g.w];
                for ky in 0..g.k {
                    let (y0, y1) = g.span(ky, g.h, oh);
                    for kx in 0..g.k {
                        let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                        let wv = weight[widx];
                        let (x0, x1) = g.span(kx, g.w, ow);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let grow = &gplane[y * ow + x0..y * ow + x1];
                            let start = iy * g.w + x0 + kx - g.pad;
                            let row = &src[start..start + (x1 - x0)];
                            acc += grow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(din) = din.as_mut() {
                                let drow = &mut din[in_off + start..in_off + start + (x1 - x0)];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (din, dw, db)
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, for each
/// output, the flat input index it was taken from (first maximum wins).
pub(crate) fn maxpool2x2(shape: &[usize], input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_i = base + 2 * y * w + 2 * x;
                let mut best = input[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_nearest(shape: &[usize], input: &[f64], f: usize) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let src = &input[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let row = &src[(y / f) * w..(y / f + 1) * w];
            for x in 0..ow {
                out.push(row[x / f]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(shape: &[usize], dout: &[f64], f: usize) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * f, w * f);
    let mut din = vec![0.0; nc * h * w];
    for p in 0..nc {
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut din[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                d[(y / f) * w + x / f] += g[y * ow + x];
            }
        }
    }
    din
}

/// Batched product `a[b] (m x k) * b[b] (k x n)`.
pub(crate) fn bmm(batch: usize, m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let o = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut o[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (ov, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *ov += av * bv;
                }
            }
        }
    }
    out
}

/// Batched transpose of the trailing two axes.
pub(crate) fn transpose_last2(batch: usize, r: usize, c: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for bi in 0..batch {
        let src = &a[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Per-channel mean and biased variance over every axis except axis 1.
pub(crate) fn channel_stats(shape: &[usize], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (outer, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let count = (outer * inner) as f64;
    let mut mean = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let s = &x[(o * c + ch) * inner..][..inner];
            mean[ch] += s.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let s = &x[(o * c + ch) * inner..][..inner];
            var[ch] += s.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Visit every element with its channel index (axis 1).
pub(crate) fn for_each_channel(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let (outer, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                f(i, ch);
            }
        }
    }
}
