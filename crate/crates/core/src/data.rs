//! Labelled samples built from a dataset manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::spikeio::{read_mask, read_stream, DatasetManifest, Light, Mask, SpikeIoError, SpikeRepr, SpikeStream, Split};

/// One labelled frame: the interval representation around it and its mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sequence: usize,
    pub frame: usize,
    pub repr: SpikeRepr,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub split: Split,
    pub light: Light,
    /// Indices into [`Dataset::samples`], in frame order.
    pub samples: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub sequences: Vec<Sequence>,
}

/// Interval representation at `frame`, computed on the `window` frames
/// centred on it (clipped to the stream).
pub fn window_repr(stream: &SpikeStream, frame: usize, window: usize, max_gray: f64) -> Result<SpikeRepr, SpikeIoError> {
    let start = frame.saturating_sub(window / 2);
    let len = window.min(stream.frames().saturating_sub(start));
    let clip = stream.slice(start, len)?;
    clip.isi_repr(frame - start, max_gray)
}

/// Representations of consecutive non-overlapping windows, each taken at the
/// window centre.
pub fn stream_windows(stream: &SpikeStream, window: usize, max_gray: f64) -> Result<Vec<SpikeRepr>, SpikeIoError> {
    (0..stream.frames() / window).map(|i| stream.slice(i * window, window)?.isi_repr(window / 2, max_gray)).collect()
}

impl Dataset {
    /// Load the streams of `manifest_path` whose split passes `keep`.
    /// Every stream must be `width x height`.
    pub fn load(manifest_path: &Path, keep: impl Fn(Split) -> bool + Sync, window: usize, max_gray: f64, size: (usize, usize)) -> Result<Self, SpikeIoError> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base: PathBuf = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let entries: Vec<_> = manifest.streams.iter().filter(|s| keep(s.split)).collect();
        let loaded = crate::worker_pool().install(|| {
            entries
                .par_iter()
                .map(|entry| {
                    let stream = read_stream(&base.join(&entry.path))?;
                    if (stream.width(), stream.height()) != size {
                        return Err(SpikeIoError::Manifest(format!(
                            "{} is {}x{}, expected {}x{}",
                            entry.path.display(),
                            stream.width(),
                            stream.height(),
                            size.0,
                            size.1
                        )));
                    }
                    entry
                        .masks
                        .iter()
                        .map(|mk| {
                            let mask = read_mask(&base.join(&mk.path), mk.frame)?;
                            if (mask.width, mask.height) != size {
                                return Err(SpikeIoError::Manifest(format!("mask {} does not match its stream", mk.path.display())));
                            }
                            Ok((window_repr(&stream, mk.frame, window, max_gray)?, mask))
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mut ds = Dataset::default();
        for (entry, pairs) in entries.iter().zip(loaded) {
            let seq = ds.sequences.len();
            let mut idx = Vec::with_capacity(pairs.len());
            for (repr, mask) in pairs {
                idx.push(ds.samples.len());
                ds.samples.push(Sample { sequence: seq, frame: mask.timestamp_frame, repr, mask });
            }
            let name = entry.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            ds.sequences.push(Sequence { name, split: entry.split, light: entry.light, samples: idx });
        }
        Ok(ds)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Mean foreground fraction over every mask.
    pub fn mean_mask(&self) -> f64 {
        let fg: usize = self.samples.iter().map(|s| s.mask.foreground()).sum();
        let px: usize = self.samples.iter().map(|s| s.mask.values.len()).sum();
        fg as f64 / px.max(1) as f64
    }
}
