//! Train a small model on freshly simulated data and print each epoch.

use spikesal::data::Dataset;
use spikesal::rst::ModelConfig;
use spikesal::simcam::{generate_dataset, GeneratorConfig};
use spikesal::train::{train_on, OptimizerConfig, RunConfig, TrainOptions};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let gen = GeneratorConfig { sequences: 6, val_sequences: 2, labels_per_seq: 3, width: 32, height: 32, frames_per_label: 200, ..Default::default() };
    generate_dataset(&gen, &dir.path().join("data"), 0)?;

    let cfg = RunConfig {
        manifest: dir.path().join("data/manifest.json"),
        model: ModelConfig { dim: 32, heads: 4, steps: 5, rfa_blocks: 2, ..Default::default() },
        optimizer: OptimizerConfig { lr_start: 1e-2, lr_end: 1e-3, epochs: 10, ..Default::default() },
        batch_size: 2,
        input_size: [32, 32],
        window: 200,
        ..Default::default()
    };
    let ds = Dataset::load(&cfg.manifest, |_| true, cfg.window, cfg.max_gray, cfg.size())?;
    let logs = train_on(&cfg, &ds, &dir.path().join("run"), &TrainOptions { verbose: true, ..Default::default() })?;
    let last = logs.last().expect("at least one epoch");
    println!("final: loss {:.4}, val MAE {:.4}, val mean F {:.4}", last.loss, last.val_mae, last.val_mean_f_beta);
    Ok(())
}
