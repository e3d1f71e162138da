//! Saliency metrics and SNN/ANN energy estimation.
//!
//! Predictions are real maps in `[0, 1]`; ground truth is one byte per pixel,
//! 0 or 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuro::{NeuronState, Trace};
use crate::rst::{Mode, ModelError, Rst};
use crate::spikeio::SpikeRepr;

pub const BETA2: f64 = 0.3;
pub const THRESHOLDS: usize = 256;
pub const S_ALPHA: f64 = 0.5;
/// Machine epsilon, as used by the reference S-measure code.
const EPS: f64 = f64::EPSILON;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction has {pred} pixels, ground truth {gt}")]
    Shape { pred: usize, gt: usize },
    #[error("no images were evaluated")]
    Empty,
}

fn check(s: &[f64], g: &[u8]) -> Result<(), MetricError> {
    if s.len() != g.len() || s.is_empty() {
        return Err(MetricError::Shape { pred: s.len(), gt: g.len() });
    }
    Ok(())
}

/// `g` holds a binary mask in `{0, 1}`, as for every metric here.
pub fn mae(s: &[f64], g: &[u8]) -> Result<f64, MetricError> {
    check(s, g)?;
    Ok(s.iter().zip(g).map(|(&p, &t)| (p - t as f64).abs()).sum::<f64>() / s.len() as f64)
}

/// Threshold `k / 255`.
pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// `(1 + b2) P R / (b2 P + R)`, 0 when undefined.
pub fn f_beta(tp: usize, predicted: usize, positives: usize) -> f64 {
    let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let r = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
    let den = BETA2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * p * r / den
    }
}

/// F-measure at each of the 256 thresholds; pixels with `S >= k/255` are
/// predicted salient.
pub fn f_curve(s: &[f64], g: &[u8]) -> Result<Vec<f64>, MetricError> {
    check(s, g)?;
    // hist[k]: pixels whose highest satisfied threshold is k
    let mut hist_all = [0usize; THRESHOLDS + 1];
    let mut hist_fg = [0usize; THRESHOLDS + 1];
    for (&p, &t) in s.iter().zip(g) {
        let mut k = (p * 255.0).floor().clamp(-1.0, 255.0) as isize;
        while k >= 0 && p < threshold(k as usize) {
            k -= 1;
        }
        while k < 255 && p >= threshold(k as usize + 1) {
            k += 1;
        }
        // slot 0 collects pixels below every threshold
        let slot = (k + 1) as usize;
        hist_all[slot] += 1;
        if t == 1 {
            hist_fg[slot] += 1;
        }
    }
    let positives = g.iter().filter(|&&t| t == 1).count();
    let mut curve = vec![0.0; THRESHOLDS];
    let (mut predicted, mut tp) = (0, 0);
    for k in (0..THRESHOLDS).rev() {
        predicted += hist_all[k + 1];
        tp += hist_fg[k + 1];
        curve[k] = f_beta(tp, predicted, positives);
    }
    Ok(curve)
}

/// `(max, mean)` of [`f_curve`].
pub fn f_measures(s: &[f64], g: &[u8]) -> Result<(f64, f64), MetricError> {
    let c = f_curve(s, g)?;
    Ok((c.iter().cloned().fold(0.0, f64::max), c.iter().sum::<f64>() / c.len() as f64))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn object_similarity(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    let sigma = if values.len() > 1 { (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt() } else { 0.0 };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(s: &[f64], g: &[u8]) -> f64 {
    let fg: Vec<f64> = s.iter().zip(g).filter(|(_, &t)| t == 1).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = s.iter().zip(g).filter(|(_, &t)| t == 0).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / s.len() as f64;
    u * object_similarity(&fg) + (1.0 - u) * object_similarity(&bg)
}

/// Round half to even.
fn round_even(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 {
        2.0 * (x / 2.0).round()
    } else {
        r
    }
}

fn region_ssim(s: &[f64], g: &[f64]) -> f64 {
    let n = s.len() as f64;
    let (x, y) = (mean(s), mean(g));
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in s.iter().zip(g) {
        sx += (a - x) * (a - x);
        sy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let (sx, sy, sxy) = (sx / (n - 1.0 + EPS), sy / (n - 1.0 + EPS), sxy / (n - 1.0 + EPS));
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_score(s: &[f64], g: &[u8], w: usize, h: usize) -> f64 {
    let area: usize = g.iter().map(|&t| t as usize).sum();
    let (cx, cy) = if area == 0 {
        (round_even(w as f64 / 2.0), round_even(h as f64 / 2.0))
    } else {
        let (mut sx, mut sy) = (0.0, 0.0);
        for (i, &t) in g.iter().enumerate() {
            if t == 1 {
                sx += (i % w) as f64;
                sy += (i / w) as f64;
            }
        }
        (round_even(sx / area as f64), round_even(sy / area as f64))
    };
    let (x, y) = ((cx as usize + 1).min(w), (cy as usize + 1).min(h));
    let total = (w * h) as f64;
    let quads = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    let mut weights = [(x * y) as f64 / total, (y * (w - x)) as f64 / total, ((h - y) * x) as f64 / total, 0.0];
    weights[3] = 1.0 - weights[0] - weights[1] - weights[2];
    let mut score = 0.0;
    for ((r0, r1, c0, c1), wt) in quads.into_iter().zip(weights) {
        if r0 == r1 || c0 == c1 {
            continue;
        }
        let mut ps = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut gs = Vec::with_capacity(ps.capacity());
        for r in r0..r1 {
            for c in c0..c1 {
                ps.push(s[r * w + c]);
                gs.push(g[r * w + c] as f64);
            }
        }
        score += wt * region_ssim(&ps, &gs);
    }
    score
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`, with the
/// all-background and all-foreground special cases.
pub fn s_measure(s: &[f64], g: &[u8], width: usize, height: usize) -> Result<f64, MetricError> {
    check(s, g)?;
    if width * height != s.len() {
        return Err(MetricError::Shape { pred: s.len(), gt: width * height });
    }
    let y = g.iter().map(|&t| t as f64).sum::<f64>() / g.len() as f64;
    let sm = if y == 0.0 {
        1.0 - mean(s)
    } else if y == 1.0 {
        mean(s)
    } else {
        S_ALPHA * object_score(s, g) + (1.0 - S_ALPHA) * region_score(s, g, width, height)
    };
    Ok(sm.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub images: usize,
    pub mae: f64,
    pub f_beta_max: f64,
    pub mean_f_beta: f64,
    pub s_measure: f64,
}

/// Dataset-level metrics; the F-measure curve is averaged over images
/// before taking its maximum and mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Scores,
    pub per_sequence: BTreeMap<String, Scores>,
    pub f_curve: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Acc {
    images: usize,
    mae: f64,
    s: f64,
    curve: Vec<f64>,
}

impl Default for Acc {
    fn default() -> Self {
        Self { images: 0, mae: 0.0, s: 0.0, curve: vec![0.0; THRESHOLDS] }
    }
}

impl Acc {
    fn add(&mut self, mae: f64, s: f64, curve: &[f64]) {
        self.images += 1;
        self.mae += mae;
        self.s += s;
        for (a, c) in self.curve.iter_mut().zip(curve) {
            *a += c;
        }
    }

    fn finish(&self) -> (Scores, Vec<f64>) {
        let n = self.images as f64;
        let curve: Vec<f64> = self.curve.iter().map(|c| c / n).collect();
        let scores = Scores {
            images: self.images,
            mae: self.mae / n,
            f_beta_max: curve.iter().cloned().fold(0.0, f64::max),
            mean_f_beta: curve.iter().sum::<f64>() / curve.len() as f64,
            s_measure: self.s / n,
        };
        (scores, curve)
    }
}

/// Accumulates per-image metrics into an [`EvalReport`].
#[derive(Clone, Debug, Default)]
pub struct Evaluator {
    total: Acc,
    sequences: BTreeMap<String, Acc>,
}

impl Evaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, sequence: &str, s: &[f64], g: &[u8], width: usize, height: usize) -> Result<(), MetricError> {
        let m = mae(s, g)?;
        let curve = f_curve(s, g)?;
        let sm = s_measure(s, g, width, height)?;
        self.total.add(m, sm, &curve);
        self.sequences.entry(sequence.to_owned()).or_default().add(m, sm, &curve);
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport, MetricError> {
        if self.total.images == 0 {
            return Err(MetricError::Empty);
        }
        let (overall, f_curve) = self.total.finish();
        Ok(EvalReport { overall, per_sequence: self.sequences.iter().map(|(k, a)| (k.clone(), a.finish().0)).collect(), f_curve })
    }
}

impl EvalReport {
    /// Aligned plain-text table, one row per sequence plus the total.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8}", "sequence", "images", "MAE", "maxF", "meanF", "S");
        let row = |out: &mut String, name: &str, s: &Scores| {
            let _ = writeln!(out, "{:<16} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", name, s.images, s.mae, s.f_beta_max, s.mean_f_beta, s.s_measure);
        };
        for (name, s) in &self.per_sequence {
            row(&mut out, name, s);
        }
        row(&mut out, "all", &self.overall);
        out
    }
}

/// Energy per operation, in picojoules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac_pj: 4.6, e_ac_pj: 0.9 }
    }
}

/// Ratio reported when the spiking network performs no operation.
pub const RATIO_SENTINEL: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub analog: bool,
    pub snn_ops: u64,
    pub ann_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Accumulates triggered by spikes.
    pub ac_ops: u64,
    /// Multiply-accumulates of the dense single-pass equivalent network.
    pub mac_ops: u64,
    /// Multiply-accumulates the spiking network spends on analog input.
    pub snn_mac_ops: u64,
    pub snn_energy_j: f64,
    pub ann_energy_j: f64,
    pub ratio: f64,
    pub layers: Vec<LayerEnergy>,
}

/// Energy of the forward pass recorded in `trace`.
///
/// Spiking layers cost one accumulate per input spike and target; a layer
/// fed analog values costs a multiply-accumulate per non-zero input and
/// target. The equivalent network runs every layer densely once.
pub fn energy_from_trace(trace: &Trace, k: &EnergyConstants) -> EnergyReport {
    let mut r = EnergyReport { ac_ops: 0, mac_ops: 0, snn_mac_ops: 0, snn_energy_j: 0.0, ann_energy_j: 0.0, ratio: 0.0, layers: Vec::new() };
    for s in &trace.synapses {
        if s.analog {
            r.snn_mac_ops += s.ops();
        } else {
            r.ac_ops += s.ops();
        }
        r.mac_ops += s.dense_macs;
        r.layers.push(LayerEnergy { name: s.name.clone(), analog: s.analog, snn_ops: s.ops(), ann_macs: s.dense_macs });
    }
    r.snn_energy_j = (r.ac_ops as f64 * k.e_ac_pj + r.snn_mac_ops as f64 * k.e_mac_pj) * 1e-12;
    r.ann_energy_j = r.mac_ops as f64 * k.e_mac_pj * 1e-12;
    r.ratio = if r.snn_energy_j > 0.0 { r.ann_energy_j / r.snn_energy_j } else { RATIO_SENTINEL };
    r
}

/// Energy of one multi-step inference of `repr`.
///
/// A representation without spikes triggers no synaptic event anywhere in
/// the network, so every layer is charged zero operations.
pub fn estimate_energy(model: &mut Rst, repr: &SpikeRepr, k: &EnergyConstants) -> Result<EnergyReport, ModelError> {
    let mut trace = Trace::default();
    model.predict(&[repr], Mode::MultiStep, &mut NeuronState::new(), Some(&mut trace))?;
    if repr.values.iter().all(|&v| v == 0.0) {
        trace.synapses.iter_mut().for_each(|s| s.input_nonzero = 0);
    }
    Ok(energy_from_trace(&trace, k))
}

impl EnergyReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>6} {:>14} {:>14}", "layer", "input", "snn ops", "ann MACs");
        for l in &self.layers {
            let _ = writeln!(out, "{:<20} {:>6} {:>14} {:>14}", l.name, if l.analog { "analog" } else { "spike" }, l.snn_ops, l.ann_macs);
        }
        let _ = writeln!(out, "snn: {} AC + {} MAC = {:.4e} J", self.ac_ops, self.snn_mac_ops, self.snn_energy_j);
        let _ = writeln!(out, "ann: {} MAC = {:.4e} J", self.mac_ops, self.ann_energy_j);
        let _ = writeln!(out, "ratio: {:.2}", self.ratio);
        out
    }
}
