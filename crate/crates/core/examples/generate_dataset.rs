//! Write a small labelled spike dataset and list what was produced.
//!
//! `cargo run --example generate_dataset -- <out-dir>`

use std::path::PathBuf;

use spikesal::simcam::{generate_dataset, GeneratorConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("spikesal-data"));
    let cfg = GeneratorConfig { sequences: 3, val_sequences: 1, labels_per_seq: 2, width: 32, height: 32, frames_per_label: 200, ..Default::default() };
    let manifest = generate_dataset(&cfg, &out, 7)?;
    println!("{} streams, {} masks in {}", manifest.streams.len(), manifest.mask_count(), out.display());
    for s in &manifest.streams {
        println!("  {:<12} {:?} {:?} {} masks", s.path.display(), s.split, s.light, s.masks.len());
    }
    Ok(())
}
