//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::stream_windows;
use crate::metrics::{estimate_energy, EnergyConstants};
use crate::neuro::NeuronState;
use crate::rst::Mode;
use crate::simcam::{generate_dataset, GeneratorConfig};
use crate::spikeio::{read_stream, write_pgm, Split};
use crate::train::{evaluate, readout_map, train, Checkpoint, RunConfig, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "spikesal", version, about = "Spiking salient-object detection on spike-camera streams")]
pub struct Cli {
    /// Run every worker pool on a single thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a labelled spike-camera dataset.
    GenData(GenDataArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write saliency maps for a spike stream.
    Infer(InferArgs),
    /// Estimate spiking versus dense energy on a stream.
    Energy(EnergyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator configuration (JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Single,
    Multi,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => Mode::SingleStep,
            ModeArg::Multi => Mode::MultiStep,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum SplitArg {
    #[default]
    Val,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory or one `epoch_NNN` directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to the mode the checkpoint was trained in.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    /// Directory for the `map_NNNN.pgm` outputs.
    #[arg(long)]
    pub out: PathBuf,
    /// One step per window with potentials carried across windows.
    #[arg(long)]
    pub continuous: bool,
    /// Frames per window; defaults to the checkpoint's window.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` and run the selected command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    if cli.deterministic {
        std::env::set_var(crate::THREADS_ENV, "1");
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Energy(a) => energy_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg: GeneratorConfig = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => GeneratorConfig::default(),
    };
    let m = generate_dataset(&cfg, &a.out, a.seed)?;
    println!("wrote {} streams and {} masks to {}", m.streams.len(), m.mask_count(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if cfg.manifest.is_relative() {
        let base = a.config.parent().unwrap_or(Path::new("."));
        if !cfg.manifest.exists() && base.join(&cfg.manifest).exists() {
            cfg.manifest = base.join(&cfg.manifest);
        }
    }
    let opts = TrainOptions { resume: a.resume, stop_after: a.stop_after, verbose: !a.quiet };
    let logs = train(&cfg, &a.out, &opts)?;
    if let Some(l) = logs.last() {
        println!("epoch {} loss {:.6} val mae {:.4} val mean F {:.4}", l.epoch, l.loss, l.val_mae, l.val_mean_f_beta);
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut ck = Checkpoint::load(&a.ckpt)?;
    let mut cfg = ck.config.clone();
    cfg.manifest = a.manifest.clone();
    let mode = a.mode.map(Mode::from).unwrap_or(cfg.mode);
    let ds = cfg.load_split(None)?;
    let keep = |s: Split| match a.split {
        SplitArg::Val => s == Split::Val,
        SplitArg::Train => s == Split::Train,
        SplitArg::All => true,
    };
    let report = evaluate(&mut ck.model, &ds, keep, mode, cfg.readout(), cfg.batch_size)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn to_gray(v: &[f64]) -> Vec<u8> {
    v.iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let mut ck = Checkpoint::load(&a.ckpt)?;
    let stream = read_stream(&a.stream)?;
    let [w, h] = ck.config.input_size;
    if (stream.width(), stream.height()) != (w, h) {
        bail!("stream is {}x{} but the checkpoint expects {}x{}", stream.width(), stream.height(), w, h);
    }
    let window = a.window.unwrap_or(ck.config.window);
    let reprs = stream_windows(&stream, window, ck.config.max_gray)?;
    if reprs.is_empty() {
        bail!("stream has {} frames, fewer than one {}-frame window", stream.frames(), window);
    }
    fs::create_dir_all(&a.out)?;
    let mut state = NeuronState::new();
    for (i, r) in reprs.iter().enumerate() {
        let map = if a.continuous {
            ck.model.predict(&[r], Mode::SingleStep, &mut state, None)?.remove(0)
        } else {
            let maps = ck.model.predict(&[r], Mode::MultiStep, &mut NeuronState::new(), None)?;
            readout_map(&maps, ck.config.readout())
        };
        write_pgm(&a.out.join(format!("map_{i:04}.pgm")), w, h, &to_gray(map.data()))?;
    }
    println!("wrote {} maps to {}", reprs.len(), a.out.display());
    Ok(())
}

fn energy_cmd(a: EnergyArgs) -> Result<()> {
    let mut ck = Checkpoint::load(&a.ckpt)?;
    let stream = read_stream(&a.stream)?;
    let [w, h] = ck.config.input_size;
    if (stream.width(), stream.height()) != (w, h) {
        bail!("stream is {}x{} but the checkpoint expects {}x{}", stream.width(), stream.height(), w, h);
    }
    let window = ck.config.window.min(stream.frames());
    let repr = stream.slice(0, window)?.isi_repr(window / 2, ck.config.max_gray)?;
    let report = estimate_energy(&mut ck.model, &repr, &EnergyConstants::default())?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}
