//! Saliency losses and the per-step weighting used for multi-step training.
//!
//! Maps and masks are `(B, 1, H, W)`; every loss is averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::grad::{GradError, Tape, Tensor, Var};

/// Probability clamp applied before taking logarithms.
pub const EPS: f64 = 1e-7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// How per-step maps are combined into one objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepWeighting {
    /// `sum_i alpha_i L(S_i)` with `alpha_i` proportional to `T - i + 1`.
    #[default]
    MultiStep,
    /// `L(mean_i S_i)`.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub bce: bool,
    pub iou: bool,
    pub ssim: bool,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub weighting: StepWeighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { bce: true, iou: true, ssim: true, ssim_window: 11, ssim_sigma: 1.5, weighting: StepWeighting::MultiStep }
    }
}

/// Step weights `alpha_i = (T - i + 1) / sum_j (T - j + 1)`, `i = 1..T`.
pub fn step_weights(steps: usize) -> Vec<f64> {
    let total = (steps * (steps + 1) / 2) as f64;
    (1..=steps).map(|i| (steps - i + 1) as f64 / total).collect()
}

fn check_pair(op: &'static str, s: Var<'_>, g: Var<'_>) -> Result<(), GradError> {
    if s.shape() != g.shape() || s.shape().len() != 4 {
        return Err(GradError::Shape { op, detail: format!("prediction {:?} vs target {:?}", s.shape(), g.shape()) });
    }
    Ok(())
}

/// `-mean(G ln S + (1 - G) ln(1 - S))` with `S` clamped to `[EPS, 1 - EPS]`.
pub fn bce<'t>(s: Var<'t>, g: Var<'t>) -> Result<Var<'t>, GradError> {
    check_pair("bce", s, g)?;
    let s = s.clamp(EPS, 1.0 - EPS);
    let pos = g.mul(s.ln())?;
    let neg = g.one_minus().mul(s.one_minus().ln())?;
    Ok(pos.add(neg)?.mean().scale(-1.0))
}

/// `1 - sum(SG) / (sum S + sum G - sum SG)` per image, averaged.
pub fn iou_loss<'t>(s: Var<'t>, g: Var<'t>) -> Result<Var<'t>, GradError> {
    check_pair("iou_loss", s, g)?;
    let b = s.shape()[0];
    let mut total: Option<Var<'t>> = None;
    for i in 0..b {
        let (si, gi) = (s.narrow(0, i, 1)?, g.narrow(0, i, 1)?);
        let inter = si.mul(gi)?.sum();
        let union = si.sum().add(gi.sum())?.sub(inter)?;
        let l = inter.div(union)?.one_minus();
        total = Some(match total {
            None => l,
            Some(t) => t.add(l)?,
        });
    }
    Ok(total.expect("non-empty batch").scale(1.0 / b as f64))
}

/// Normalised `size x size` Gaussian window, `(1, 1, size, size)`.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / sum).collect();
    Tensor::from_fn(&[1, 1, size, size], |k| g[k / size] * g[k % size])
}

/// `1 - mean(SSIM map)`; local statistics from a zero-padded Gaussian
/// window, constants `C1 = 0.01^2`, `C2 = 0.03^2`.
pub fn ssim_loss<'t>(s: Var<'t>, g: Var<'t>, window: usize, sigma: f64) -> Result<Var<'t>, GradError> {
    check_pair("ssim_loss", s, g)?;
    if s.shape()[1] != 1 {
        return Err(GradError::Shape { op: "ssim_loss", detail: format!("expected one channel, got {:?}", s.shape()) });
    }
    let tape = s.tape();
    let w = tape.constant(gaussian_window(window, sigma));
    let pad = window / 2;
    let blur = |x: Var<'t>| x.conv2d(w, None, pad);
    let (mu_s, mu_g) = (blur(s)?, blur(g)?);
    let (mu_ss, mu_gg, mu_sg) = (mu_s.mul(mu_s)?, mu_g.mul(mu_g)?, mu_s.mul(mu_g)?);
    let var_s = blur(s.mul(s)?)?.sub(mu_ss)?;
    let var_g = blur(g.mul(g)?)?.sub(mu_gg)?;
    let cov = blur(s.mul(g)?)?.sub(mu_sg)?;
    let num = mu_sg.scale(2.0).add_scalar(SSIM_C1).mul(cov.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_ss.add(mu_gg)?.add_scalar(SSIM_C1).mul(var_s.add(var_g)?.add_scalar(SSIM_C2))?;
    Ok(num.div(den)?.mean().one_minus())
}

/// Sum of the enabled loss components for one map.
pub fn map_loss<'t>(s: Var<'t>, g: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>, GradError> {
    let mut parts = Vec::with_capacity(3);
    if cfg.bce {
        parts.push(bce(s, g)?);
    }
    if cfg.iou {
        parts.push(iou_loss(s, g)?);
    }
    if cfg.ssim {
        parts.push(ssim_loss(s, g, cfg.ssim_window, cfg.ssim_sigma)?);
    }
    let mut it = parts.into_iter();
    let first = it.next().ok_or_else(|| GradError::Shape { op: "map_loss", detail: "every loss component is disabled".into() })?;
    it.try_fold(first, |acc, p| acc.add(p))
}

/// Weighted sum over step maps, `alpha` from [`step_weights`].
pub fn multi_step_loss<'t>(maps: &[Var<'t>], g: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>, GradError> {
    if maps.is_empty() {
        return Err(GradError::Shape { op: "multi_step_loss", detail: "no step maps".into() });
    }
    let weights = step_weights(maps.len());
    let mut total: Option<Var<'t>> = None;
    for (m, a) in maps.iter().zip(weights) {
        let l = map_loss(*m, g, cfg)?.scale(a);
        total = Some(match total {
            None => l,
            Some(t) => t.add(l)?,
        });
    }
    Ok(total.unwrap())
}

/// Loss of the step-averaged map.
pub fn vanilla_loss<'t>(maps: &[Var<'t>], g: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>, GradError> {
    map_loss(mean_map(maps)?, g, cfg)
}

pub fn mean_map<'t>(maps: &[Var<'t>]) -> Result<Var<'t>, GradError> {
    let first = *maps.first().ok_or_else(|| GradError::Shape { op: "mean_map", detail: "no step maps".into() })?;
    let sum = maps[1..].iter().try_fold(first, |acc, m| acc.add(*m))?;
    Ok(sum.scale(1.0 / maps.len() as f64))
}

/// Objective selected by `cfg.weighting`.
pub fn step_loss<'t>(maps: &[Var<'t>], g: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>, GradError> {
    match cfg.weighting {
        StepWeighting::MultiStep => multi_step_loss(maps, g, cfg),
        StepWeighting::Vanilla => vanilla_loss(maps, g, cfg),
    }
}

/// Evaluate [`map_loss`] on plain tensors.
pub fn map_loss_value(s: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<f64, GradError> {
    let tape = Tape::new();
    Ok(map_loss(tape.constant(s.clone()), tape.constant(g.clone()), cfg)?.value().item())
}
