//! Spike streams, ground-truth masks, and the dataset manifest.
//!
//! A `.spk` file is a 26-byte little-endian header followed by the frames:
//!
//! ```text
//! "SPKS" | version u16 | width u32 | height u32 | frames u64 | rate_hz u32
//! ```
//!
//! Each frame is `ceil(width * height / 8)` bytes. Pixel `p = y * width + x`
//! lives in byte `p / 8`, bit `p % 8` (least significant bit first); the
//! padding bits at the end of a frame are zero.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::Tensor;

pub const MAGIC: &[u8; 4] = b"SPKS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 26;
/// Default maximum grey level of the interval representation.
pub const DEFAULT_MAX_GRAY: f64 = 255.0;

#[derive(Debug, Error)]
pub enum SpikeIoError {
    #[error("not a spike stream: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported spike stream version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated spike stream: expected {expected} payload bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("stream dimensions {width}x{height}x{frames} overflow the addressable size")]
    DimensionOverflow { width: u32, height: u32, frames: u64 },
    #[error("frame {frame} out of range for a stream of {frames} frames")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("window of {window} frames does not fit a stream of {frames} frames")]
    BadWindow { window: usize, frames: usize },
    #[error("invalid PGM: {0}")]
    Pgm(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Binary spike array `frames x height x width` as emitted by a spike camera.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeStream {
    width: usize,
    height: usize,
    rate_hz: u32,
    frames: usize,
    data: Vec<u8>,
}

impl SpikeStream {
    pub fn zeros(width: usize, height: usize, rate_hz: u32, frames: usize) -> Self {
        let fb = Self::bytes_per_frame(width, height);
        Self { width, height, rate_hz, frames, data: vec![0; fb * frames] }
    }

    pub fn bytes_per_frame(width: usize, height: usize) -> usize {
        (width * height).div_ceil(8)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rate_hz(&self) -> u32 {
        self.rate_hz
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn payload(&self) -> &[u8] {
        &self.data
    }

    pub fn frame_bytes(&self, frame: usize) -> &[u8] {
        let fb = Self::bytes_per_frame(self.width, self.height);
        &self.data[frame * fb..(frame + 1) * fb]
    }

    fn frame_bytes_mut(&mut self, frame: usize) -> &mut [u8] {
        let fb = Self::bytes_per_frame(self.width, self.height);
        &mut self.data[frame * fb..(frame + 1) * fb]
    }

    /// Spike at flat pixel index `p` of `frame`.
    pub fn bit(&self, frame: usize, p: usize) -> bool {
        self.frame_bytes(frame)[p / 8] >> (p % 8) & 1 == 1
    }

    pub fn get(&self, frame: usize, x: usize, y: usize) -> bool {
        self.bit(frame, y * self.width + x)
    }

    pub fn set_bit(&mut self, frame: usize, p: usize, spike: bool) {
        let byte = &mut self.frame_bytes_mut(frame)[p / 8];
        if spike {
            *byte |= 1 << (p % 8);
        } else {
            *byte &= !(1 << (p % 8));
        }
    }

    pub fn set(&mut self, frame: usize, x: usize, y: usize, spike: bool) {
        let p = y * self.width + x;
        self.set_bit(frame, p, spike);
    }

    /// Overwrite `frame` from one bool per pixel.
    pub fn set_frame(&mut self, frame: usize, spikes: &[bool]) {
        assert_eq!(spikes.len(), self.pixels());
        let bytes = self.frame_bytes_mut(frame);
        bytes.fill(0);
        for (p, _) in spikes.iter().enumerate().filter(|(_, &s)| s) {
            bytes[p / 8] |= 1 << (p % 8);
        }
    }

    pub fn popcount(&self, frame: usize) -> usize {
        self.frame_bytes(frame).iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn total_spikes(&self) -> u64 {
        self.data.iter().map(|b| b.count_ones() as u64).sum()
    }

    fn check_frame(&self, frame: usize) -> Result<(), SpikeIoError> {
        if frame >= self.frames {
            return Err(SpikeIoError::FrameOutOfRange { frame, frames: self.frames });
        }
        Ok(())
    }

    /// Copy of frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<SpikeStream, SpikeIoError> {
        if len == 0 || start + len > self.frames {
            return Err(SpikeIoError::BadWindow { window: start + len, frames: self.frames });
        }
        let fb = Self::bytes_per_frame(self.width, self.height);
        Ok(SpikeStream {
            width: self.width,
            height: self.height,
            rate_hz: self.rate_hz,
            frames: len,
            data: self.data[start * fb..(start + len) * fb].to_vec(),
        })
    }

    /// Light intensity scale of one frame: spikes divided by pixel count.
    pub fn lis(&self, frame: usize) -> Result<f64, SpikeIoError> {
        self.check_frame(frame)?;
        Ok(self.popcount(frame) as f64 / self.pixels() as f64)
    }

    /// Average of [`lis`](Self::lis) over every frame.
    pub fn mean_lis(&self) -> f64 {
        if self.frames == 0 {
            return 0.0;
        }
        self.total_spikes() as f64 / (self.frames * self.pixels()) as f64
    }

    /// Inter-spike-interval representation at `at_frame`.
    ///
    /// For each pixel, `dt` is the distance from the latest spike at or
    /// before `at_frame` to the first spike after it, and the value is
    /// `max_gray / dt`. Pixels without such a spike pair map to 0.
    pub fn isi_repr(&self, at_frame: usize, max_gray: f64) -> Result<SpikeRepr, SpikeIoError> {
        self.check_frame(at_frame)?;
        let values = (0..self.pixels())
            .map(|p| {
                let prev = (0..=at_frame).rev().find(|&f| self.bit(f, p));
                let next = (at_frame + 1..self.frames).find(|&f| self.bit(f, p));
                match (prev, next) {
                    (Some(a), Some(b)) => max_gray / (b - a) as f64,
                    _ => 0.0,
                }
            })
            .collect();
        Ok(SpikeRepr { width: self.width, height: self.height, values, max_gray })
    }

    /// Spike-count representation over the first `window` frames, scaled so
    /// that a pixel firing every frame reaches `max_gray`.
    pub fn spike_count_repr(&self, window: usize, max_gray: f64) -> Result<SpikeRepr, SpikeIoError> {
        if window == 0 || window > self.frames {
            return Err(SpikeIoError::BadWindow { window, frames: self.frames });
        }
        let mut counts = vec![0u32; self.pixels()];
        for f in 0..window {
            for (p, c) in counts.iter_mut().enumerate() {
                *c += self.bit(f, p) as u32;
            }
        }
        let scale = max_gray / window as f64;
        let values = counts.into_iter().map(|c| c as f64 * scale).collect();
        Ok(SpikeRepr { width: self.width, height: self.height, values, max_gray })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), SpikeIoError> {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.width as u32).to_le_bytes());
        header.extend_from_slice(&(self.height as u32).to_le_bytes());
        header.extend_from_slice(&(self.frames as u64).to_le_bytes());
        header.extend_from_slice(&self.rate_hz.to_le_bytes());
        w.write_all(&header)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, SpikeIoError> {
        let mut header = [0u8; HEADER_LEN];
        let got = read_up_to(&mut r, &mut header)?;
        if got < 4 || &header[..4] != MAGIC {
            let mut magic = [0u8; 4];
            magic[..got.min(4)].copy_from_slice(&header[..got.min(4)]);
            return Err(SpikeIoError::BadMagic(magic));
        }
        if got < HEADER_LEN {
            return Err(SpikeIoError::Truncated { expected: HEADER_LEN as u64, found: got as u64 });
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(SpikeIoError::UnsupportedVersion(version));
        }
        let width = u32::from_le_bytes(header[6..10].try_into().unwrap());
        let height = u32::from_le_bytes(header[10..14].try_into().unwrap());
        let frames = u64::from_le_bytes(header[14..22].try_into().unwrap());
        let rate_hz = u32::from_le_bytes(header[22..26].try_into().unwrap());
        let overflow = SpikeIoError::DimensionOverflow { width, height, frames };
        let fb = (width as u64).checked_mul(height as u64).map(|p| p.div_ceil(8));
        let payload_len = fb.and_then(|fb| fb.checked_mul(frames)).filter(|&n| n <= isize::MAX as u64);
        let Some(payload_len) = payload_len else { return Err(overflow) };
        let mut data = Vec::new();
        r.take(payload_len).read_to_end(&mut data)?;
        if (data.len() as u64) < payload_len {
            return Err(SpikeIoError::Truncated { expected: payload_len, found: data.len() as u64 });
        }
        Ok(SpikeStream { width: width as usize, height: height as usize, rate_hz, frames: frames as usize, data })
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

pub fn write_stream(stream: &SpikeStream, path: &Path) -> Result<(), SpikeIoError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    stream.write_to(&mut f)?;
    f.flush()?;
    Ok(())
}

pub fn read_stream(path: &Path) -> Result<SpikeStream, SpikeIoError> {
    SpikeStream::read_from(io::BufReader::new(fs::File::open(path)?))
}

/// Dense per-pixel representation fed to the network.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRepr {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub max_gray: f64,
}

impl SpikeRepr {
    /// `(1, 1, height, width)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.values.clone()).expect("repr size")
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Binary ground-truth mask attached to a frame of a stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    /// One byte per pixel, 0 or 1.
    pub values: Vec<u8>,
    pub timestamp_frame: usize,
}

impl Mask {
    pub fn new(width: usize, height: usize, values: Vec<u8>, timestamp_frame: usize) -> Self {
        assert_eq!(values.len(), width * height);
        assert!(values.iter().all(|&v| v <= 1), "mask values must be binary");
        Self { width, height, values, timestamp_frame }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.values.iter().map(|&v| v as f64).collect()).expect("mask size")
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Sizes of the 4-connected foreground components.
    pub fn components(&self) -> Vec<usize> {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..w * h {
            if self.values[start] == 0 || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut size = 0;
            while let Some(p) = stack.pop() {
                size += 1;
                let (x, y) = (p % w, p / w);
                let mut visit = |q: usize| {
                    if self.values[q] == 1 && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
            }
            sizes.push(size);
        }
        sizes
    }
}

/// Write an 8-bit binary PGM (`P5`) of `values` in `[0, 255]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<(), SpikeIoError> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    fs::write(path, out)?;
    Ok(())
}

/// Read an 8-bit binary PGM. Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), SpikeIoError> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(SpikeIoError::Pgm("header ended early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // single whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(SpikeIoError::Pgm(format!("magic {} is not P5", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| SpikeIoError::Pgm(format!("bad number {s}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(SpikeIoError::Pgm(format!("maxval {maxval} is not 8-bit")));
    }
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| SpikeIoError::Pgm("raster truncated".into()))?;
    Ok((w, h, raster.to_vec()))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<(), SpikeIoError> {
    let px: Vec<u8> = mask.values.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    write_pgm(path, mask.width, mask.height, &px)
}

pub fn read_mask(path: &Path, timestamp_frame: usize) -> Result<Mask, SpikeIoError> {
    let (w, h, px) = read_pgm(path)?;
    let values = px.into_iter().map(|v| (v > 127) as u8).collect();
    Ok(Mask { width: w, height: h, values, timestamp_frame })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Light {
    High,
    Low,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub path: PathBuf,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub path: PathBuf,
    pub split: Split,
    pub light: Light,
    pub masks: Vec<MaskEntry>,
}

/// JSON index of a dataset. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub streams: Vec<StreamEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), SpikeIoError> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(path, json)?;
        Ok(())
    }

    /// Load and validate: every referenced file exists and mask frames are
    /// strictly increasing within a stream.
    pub fn load(path: &Path) -> Result<Self, SpikeIoError> {
        let m: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
        m.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(m)
    }

    pub fn validate(&self, base: &Path) -> Result<(), SpikeIoError> {
        for s in &self.streams {
            if !base.join(&s.path).is_file() {
                return Err(SpikeIoError::Manifest(format!("missing stream {}", s.path.display())));
            }
            for pair in s.masks.windows(2) {
                if pair[1].frame <= pair[0].frame {
                    return Err(SpikeIoError::Manifest(format!(
                        "{}: mask frames {} then {} are not strictly increasing",
                        s.path.display(),
                        pair[0].frame,
                        pair[1].frame
                    )));
                }
            }
            for mk in &s.masks {
                if !base.join(&mk.path).is_file() {
                    return Err(SpikeIoError::Manifest(format!("missing mask {}", mk.path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn mask_count(&self) -> usize {
        self.streams.iter().map(|s| s.masks.len()).sum()
    }
}

/// Summary statistics of one (split, light) group of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GroupStats {
    pub sequences: usize,
    pub spikes: u64,
    pub mean_spikes: f64,
    pub mean_lis: f64,
    pub mean_objects: f64,
    pub mean_object_size: f64,
}

/// Per-group statistics plus the dataset-wide total.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub groups: BTreeMap<String, GroupStats>,
    pub total: GroupStats,
}

#[derive(Default)]
struct Accum {
    sequences: usize,
    spikes: u64,
    lis_sum: f64,
    masks: usize,
    objects: usize,
    object_pixels: usize,
}

impl Accum {
    fn finish(&self) -> GroupStats {
        let per = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
        GroupStats {
            sequences: self.sequences,
            spikes: self.spikes,
            mean_spikes: per(self.spikes as f64, self.sequences),
            mean_lis: per(self.lis_sum, self.sequences),
            mean_objects: per(self.objects as f64, self.masks),
            mean_object_size: per(self.object_pixels as f64, self.objects),
        }
    }
}

/// Sequence counts, spike totals, mean light intensity scale, and object
/// counts/sizes per split and light condition.
pub fn dataset_stats(manifest: &DatasetManifest, base: &Path) -> Result<DatasetStats, SpikeIoError> {
    let mut groups: BTreeMap<(Split, Light), Accum> = BTreeMap::new();
    let mut total = Accum::default();
    for entry in &manifest.streams {
        let stream = read_stream(&base.join(&entry.path))?;
        let lis = stream.mean_lis();
        let spikes = stream.total_spikes();
        let g = groups.entry((entry.split, entry.light)).or_default();
        for acc in [&mut *g, &mut total] {
            acc.sequences += 1;
            acc.spikes += spikes;
            acc.lis_sum += lis;
        }
        for mk in &entry.masks {
            let mask = read_mask(&base.join(&mk.path), mk.frame)?;
            let comps = mask.components();
            let g = groups.get_mut(&(entry.split, entry.light)).unwrap();
            for acc in [g, &mut total] {
                acc.masks += 1;
                acc.objects += comps.len();
                acc.object_pixels += comps.iter().sum::<usize>();
            }
        }
    }
    let name = |s: Split, l: Light| format!("{}-{}", if s == Split::Train { "train" } else { "val" }, if l == Light::High { "high" } else { "low" });
    Ok(DatasetStats {
        groups: groups.iter().map(|(&(s, l), a)| (name(s, l), a.finish())).collect(),
        total: total.finish(),
    })
}
