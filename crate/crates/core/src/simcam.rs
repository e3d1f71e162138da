//! Integrate-and-fire spike camera simulator and a synthetic scene generator.
//!
//! Intensities are dimensionless, expressed per sampling step as fractions of
//! the firing threshold `φ`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spikeio::{self, DatasetManifest, Light, Mask, MaskEntry, SpikeIoError, SpikeStream, Split, StreamEntry};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite intensity {value} at ({x}, {y}), frame {frame}")]
    NonFinite { x: usize, y: usize, frame: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] SpikeIoError),
}

fn config_err(msg: impl Into<String>) -> SimError {
    SimError::Config(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Rect { half_w: f64, half_h: f64 },
    Disk { radius: f64 },
    /// Rotated thin rectangle; `angle` in radians.
    Bar { half_len: f64, half_width: f64, angle: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            Shape::Disk { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Bar { half_len, half_width, angle } => {
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= half_len && v.abs() <= half_width
            }
        }
    }

    /// Half extent of the axis-aligned bounding box, `(x, y)`.
    fn extent(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { half_w, half_h } => (half_w, half_h),
            Shape::Disk { radius } => (radius, radius),
            Shape::Bar { half_len, half_width, angle } => {
                let (s, c) = angle.sin_cos();
                (half_len * c.abs() + half_width * s.abs(), half_len * s.abs() + half_width * c.abs())
            }
        }
    }
}

/// A primitive translating at constant velocity and bouncing off the frame
/// borders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Centre at frame 0, in pixels.
    pub x: f64,
    pub y: f64,
    /// Velocity in pixels per frame.
    pub vx: f64,
    pub vy: f64,
    pub intensity: f64,
}

fn bounce(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return (lo + hi) / 2.0;
    }
    let u = (p - lo).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

impl SceneObject {
    /// Centre at frame `t`, kept inside `[extent, size - extent]`.
    pub fn centre(&self, t: usize, width: usize, height: usize) -> (f64, f64) {
        let (ex, ey) = self.shape.extent();
        let t = t as f64;
        (bounce(self.x + self.vx * t, ex, width as f64 - ex), bounce(self.y + self.vy * t, ey, height as f64 - ey))
    }
}

/// Textured background with moving salient primitives drawn over it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub duration_frames: usize,
    pub background: f64,
    /// Relative amplitude of the sinusoidal background texture, in `[0, 1]`.
    pub texture_amplitude: f64,
    pub texture_period: f64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Spatially and temporally constant intensity.
    pub fn uniform(width: usize, height: usize, duration_frames: usize, intensity: f64) -> Self {
        Self { width, height, duration_frames, background: intensity, texture_amplitude: 0.0, texture_period: 1.0, objects: Vec::new() }
    }

    /// Largest per-frame displacement allowed for a primitive.
    pub const MAX_SPEED: f64 = 1.0;

    pub fn validate(&self) -> Result<(), SimError> {
        if self.width == 0 || self.height == 0 {
            return Err(config_err("scene dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.texture_amplitude) {
            return Err(config_err("texture_amplitude must lie in [0, 1]"));
        }
        if self.texture_amplitude > 0.0 && !(self.texture_period > 0.0) {
            return Err(config_err("texture_period must be positive"));
        }
        for o in &self.objects {
            if o.vx.abs() > Self::MAX_SPEED || o.vy.abs() > Self::MAX_SPEED {
                return Err(config_err(format!("object speed ({}, {}) exceeds {} px/frame", o.vx, o.vy, Self::MAX_SPEED)));
            }
        }
        Ok(())
    }

    /// Intensity at frame `t` into `out` (row-major), and the object mask
    /// into `mask` when given.
    pub fn render(&self, t: usize, out: &mut [f64], mut mask: Option<&mut [u8]>) {
        let (w, h) = (self.width, self.height);
        let k = std::f64::consts::TAU / self.texture_period;
        for y in 0..h {
            for x in 0..w {
                let tex = if self.texture_amplitude > 0.0 { self.texture_amplitude * (k * x as f64).sin() * (k * y as f64).sin() } else { 0.0 };
                out[y * w + x] = self.background * (1.0 + tex);
            }
        }
        if let Some(m) = mask.as_deref_mut() {
            m.fill(0);
        }
        for o in &self.objects {
            let (cx, cy) = o.centre(t, w, h);
            let (ex, ey) = o.shape.extent();
            let x0 = (cx - ex).floor().max(0.0) as usize;
            let y0 = (cy - ey).floor().max(0.0) as usize;
            let x1 = ((cx + ex).ceil() as usize).min(w);
            let y1 = ((cy + ey).ceil() as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    if o.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy) {
                        out[y * w + x] = o.intensity;
                        if let Some(m) = mask.as_deref_mut() {
                            m[y * w + x] = 1;
                        }
                    }
                }
            }
        }
    }

    pub fn intensity(&self, x: usize, y: usize, t: usize) -> f64 {
        let mut buf = vec![0.0; self.width * self.height];
        self.render(t, &mut buf, None);
        buf[y * self.width + x]
    }

    pub fn object_mask(&self, t: usize) -> Mask {
        let mut buf = vec![0.0; self.width * self.height];
        let mut m = vec![0u8; self.width * self.height];
        self.render(t, &mut buf, Some(&mut m));
        Mask::new(self.width, self.height, m, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    /// Firing threshold `φ > 0`.
    pub threshold: f64,
    pub rate_hz: u32,
    /// Standard deviation of additive Gaussian noise per sampling step.
    pub noise_std: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self { threshold: 1.0, rate_hz: 20_000, noise_std: 0.0 }
    }
}

/// Integrate-and-fire sampling of `scene`.
///
/// Each pixel accumulates `I + noise` per frame (floored at zero) and emits a
/// spike whenever the accumulator reaches `φ`, which is then subtracted.
pub fn simulate(scene: &Scene, cam: &CameraParams, seed: u64) -> Result<SpikeStream, SimError> {
    if !(cam.threshold > 0.0 && cam.threshold.is_finite()) {
        return Err(config_err("camera threshold must be positive"));
    }
    if !(cam.noise_std >= 0.0 && cam.noise_std.is_finite()) {
        return Err(config_err("noise_std must be non-negative"));
    }
    scene.validate()?;
    let (w, h) = (scene.width, scene.height);
    let mut stream = SpikeStream::zeros(w, h, cam.rate_hz, scene.duration_frames);
    let mut acc = vec![0.0f64; w * h];
    let mut intensity = vec![0.0f64; w * h];
    let mut spikes = vec![false; w * h];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (cam.noise_std > 0.0).then(|| Normal::new(0.0, cam.noise_std).expect("finite std"));
    for t in 0..scene.duration_frames {
        scene.render(t, &mut intensity, None);
        for p in 0..w * h {
            let i = intensity[p];
            if !i.is_finite() {
                return Err(SimError::NonFinite { x: p % w, y: p / w, frame: t, value: i });
            }
            let n = noise.map_or(0.0, |d| d.sample(&mut rng));
            let a = (acc[p] + i + n).max(0.0);
            spikes[p] = a >= cam.threshold;
            acc[p] = if spikes[p] { a - cam.threshold } else { a };
        }
        stream.set_frame(t, &spikes);
    }
    Ok(stream)
}

/// Closed-form spike count `floor(steps · I / φ)` of a noiseless pixel under
/// constant intensity.
pub fn firing_rate_oracle(intensity: f64, threshold: f64, steps: usize) -> usize {
    assert!(intensity >= 0.0 && threshold > 0.0);
    (steps as f64 * intensity / threshold).floor() as usize
}

/// Inclusive `[lo, hi]` range used by the generator.
pub type Range = [f64; 2];

/// Synthetic dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub sequences: usize,
    pub labels_per_seq: usize,
    pub val_sequences: usize,
    /// Fraction of each split rendered in low light.
    pub low_light_fraction: f64,
    pub low_light_scale: f64,
    pub width: usize,
    pub height: usize,
    pub frames_per_label: usize,
    pub objects: [usize; 2],
    /// Object diameter in pixels.
    pub object_size: Range,
    pub fg_intensity: Range,
    pub bg_intensity: Range,
    pub texture_amplitude: f64,
    pub texture_period: f64,
    /// Speed bound in pixels per frame.
    pub max_speed: f64,
    pub camera: CameraParams,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            sequences: 4,
            labels_per_seq: 5,
            val_sequences: 1,
            low_light_fraction: 0.0,
            low_light_scale: 0.4,
            width: 64,
            height: 64,
            frames_per_label: 400,
            objects: [1, 2],
            object_size: [10.0, 20.0],
            fg_intensity: [0.09, 0.16],
            bg_intensity: [0.025, 0.045],
            texture_amplitude: 0.3,
            texture_period: 16.0,
            max_speed: 0.008,
            camera: CameraParams::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let range_ok = |r: &Range| r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1];
        if self.sequences == 0 || self.labels_per_seq == 0 {
            return Err(config_err("sequences and labels_per_seq must be at least 1"));
        }
        if self.val_sequences > self.sequences {
            return Err(config_err("val_sequences exceeds sequences"));
        }
        if !(0.0..=1.0).contains(&self.low_light_fraction) || !(self.low_light_scale > 0.0) {
            return Err(config_err("low_light_fraction must lie in [0, 1] and low_light_scale be positive"));
        }
        if self.width == 0 || self.height == 0 || self.frames_per_label < 2 {
            return Err(config_err("width, height must be positive and frames_per_label at least 2"));
        }
        if self.objects[0] > self.objects[1] {
            return Err(config_err("objects range is reversed"));
        }
        for (name, r) in [("object_size", &self.object_size), ("fg_intensity", &self.fg_intensity), ("bg_intensity", &self.bg_intensity)] {
            if !range_ok(r) {
                return Err(config_err(format!("{name} must be an ordered non-negative range")));
            }
        }
        if !(0.0..=Scene::MAX_SPEED).contains(&self.max_speed) {
            return Err(config_err(format!("max_speed must lie in [0, {}]", Scene::MAX_SPEED)));
        }
        if !(self.camera.threshold > 0.0) || !(self.camera.noise_std >= 0.0) {
            return Err(config_err("camera threshold must be positive and noise_std non-negative"));
        }
        Ok(())
    }

    pub fn frames_per_sequence(&self) -> usize {
        self.frames_per_label * (self.labels_per_seq + 1)
    }

    /// Frames carrying a mask: every `frames_per_label`, excluding 0.
    pub fn label_frames(&self) -> Vec<usize> {
        (1..=self.labels_per_seq).map(|j| j * self.frames_per_label).collect()
    }

    fn assignment(&self, index: usize) -> (Split, Light) {
        let train = self.sequences - self.val_sequences;
        let (split, pos, count) = if index < train { (Split::Train, index, train) } else { (Split::Val, index - train, self.val_sequences) };
        let low = (count as f64 * self.low_light_fraction).round() as usize;
        (split, if pos >= count - low { Light::Low } else { Light::High })
    }

    /// Random scene for sequence `index`, drawn from `rng`.
    pub fn sample_scene(&self, light: Light, rng: &mut impl Rng) -> Scene {
        let scale = if light == Light::Low { self.low_light_scale } else { 1.0 };
        let uniform = |rng: &mut _, r: Range| if r[0] == r[1] { r[0] } else { Rng::random_range(rng, r[0]..r[1]) };
        let count = rng.random_range(self.objects[0]..=self.objects[1]);
        let objects = (0..count)
            .map(|_| {
                let size = uniform(rng, self.object_size);
                let shape = match rng.random_range(0..3) {
                    0 => Shape::Rect { half_w: size / 2.0 * rng.random_range(0.6..1.0), half_h: size / 2.0 * rng.random_range(0.6..1.0) },
                    1 => Shape::Disk { radius: size / 2.0 },
                    _ => Shape::Bar { half_len: size / 2.0, half_width: size / 5.0, angle: rng.random_range(0.0..std::f64::consts::PI) },
                };
                let speed = self.max_speed * rng.random_range(0.3..1.0);
                let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                SceneObject {
                    shape,
                    x: rng.random_range(0.0..self.width as f64),
                    y: rng.random_range(0.0..self.height as f64),
                    vx: speed * dir.cos(),
                    vy: speed * dir.sin(),
                    intensity: uniform(rng, self.fg_intensity) * scale,
                }
            })
            .collect();
        Scene {
            width: self.width,
            height: self.height,
            duration_frames: self.frames_per_sequence(),
            background: uniform(rng, self.bg_intensity) * scale,
            texture_amplitude: self.texture_amplitude,
            texture_period: self.texture_period,
            objects,
        }
    }
}

/// Render, simulate and write every sequence of `cfg` under `out_dir`, then
/// write `manifest.json`. The manifest is written only after every stream
/// and mask is on disk.
pub fn generate_dataset(cfg: &GeneratorConfig, out_dir: &Path, seed: u64) -> Result<DatasetManifest, SimError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(SpikeIoError::from)?;
    let build = |i: usize| -> Result<StreamEntry, SimError> {
        let (split, light) = cfg.assignment(i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * i as u64);
        let scene = cfg.sample_scene(light, &mut rng);
        let stream = simulate(&scene, &cfg.camera, seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(2 * i as u64 + 1)))?;
        let name = format!("seq_{i:03}");
        spikeio::write_stream(&stream, &out_dir.join(format!("{name}.spk")))?;
        let masks = cfg
            .label_frames()
            .into_iter()
            .map(|frame| {
                let path = format!("{name}_f{frame:06}.pgm");
                spikeio::write_mask(&out_dir.join(&path), &scene.object_mask(frame))?;
                Ok(MaskEntry { path: path.into(), frame })
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        Ok(StreamEntry { path: format!("{name}.spk").into(), split, light, masks })
    };
    let streams = crate::worker_pool().install(|| (0..cfg.sequences).into_par_iter().map(build).collect::<Result<Vec<_>, _>>())?;
    let manifest = DatasetManifest { streams };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
