//! Run configuration, optimiser, checkpoints, training and evaluation loops.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Dataset;
use crate::grad::{GradError, ParamStore, Tape, Tensor, TensorContainer, Var};
use crate::metrics::{EvalReport, Evaluator, MetricError};
use crate::neuro::NeuronState;
use crate::objective::{map_loss, step_loss, LossConfig, StepWeighting};
use crate::rst::{batch_input, Mode, ModelConfig, ModelError, Rst};
use crate::spikeio::{SpikeIoError, Split};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("checkpoint in {dir} was written by a different configuration (hash {found}, expected {expected})")]
    ResumeMismatch { dir: PathBuf, expected: String, found: String },
    #[error("no checkpoint found in {0}")]
    NoCheckpoint(PathBuf),
    #[error(transparent)]
    Data(#[from] SpikeIoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Decoupled-weight-decay Adam with a per-epoch linear learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr_start: 2e-5, lr_end: 2e-6, epochs: 20, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl OptimizerConfig {
    /// Learning rate of `epoch` (0-based), linear from `lr_start` to `lr_end`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let f = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lr_start + (self.lr_end - self.lr_start) * f
    }
}

/// Which step map is scored at evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// `mean` under vanilla step weighting, `final` otherwise.
    #[default]
    Auto,
    Final,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// `[width, height]`.
    pub input_size: [usize; 2],
    /// Frames of spike stream around each label.
    pub window: usize,
    pub max_gray: f64,
    pub seed: u64,
    pub mode: Mode,
    pub readout: Readout,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.json"),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            input_size: [64, 64],
            window: 400,
            max_gray: 255.0,
            seed: 0,
            mode: Mode::MultiStep,
            readout: Readout::Auto,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let o = &self.optimizer;
        if o.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(o.lr_end <= o.lr_start) || !(o.lr_end >= 0.0) {
            return Err(TrainError::Config(format!("need 0 <= lr_end <= lr_start, got {} and {}", o.lr_end, o.lr_start)));
        }
        if self.batch_size == 0 || self.window < 2 {
            return Err(TrainError::Config("batch_size must be positive and window at least 2".into()));
        }
        if self.input_size.iter().any(|&s| s == 0 || s % 16 != 0) {
            return Err(TrainError::Config(format!("input_size {:?} must be positive multiples of 16", self.input_size)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    pub fn size(&self) -> (usize, usize) {
        (self.input_size[0], self.input_size[1])
    }

    pub fn readout(&self) -> Readout {
        match (self.readout, self.loss.weighting) {
            (Readout::Auto, StepWeighting::Vanilla) => Readout::Mean,
            (Readout::Auto, StepWeighting::MultiStep) => Readout::Final,
            (r, _) => r,
        }
    }

    pub fn load_split(&self, split: Option<Split>) -> Result<Dataset, TrainError> {
        Ok(Dataset::load(&self.manifest, |s| split.is_none_or(|want| s == want), self.window, self.max_gray, self.size())?)
    }
}

/// AdamW moments. Rank-1 parameters (biases, normalisation affine terms)
/// are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore, cfg: &OptimizerConfig, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (value, grad) = store.value_and_grad(id);
            let decay = if value.shape().len() > 1 { cfg.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * decay * *p;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            }
        }
    }

    fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::default();
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            c.push(format!("m.{i}"), m.clone());
            c.push(format!("v.{i}"), v.clone());
        }
        c
    }

    fn load_container(&mut self, c: &TensorContainer, step: u64) -> Result<(), TrainError> {
        for i in 0..self.m.len() {
            let get = |k: String| c.get(&k).cloned().ok_or_else(|| TrainError::Config(format!("optimiser state lacks {k}")));
            self.m[i] = get(format!("m.{i}"))?;
            self.v[i] = get(format!("v.{i}"))?;
        }
        self.step = step;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        let bad = || TrainError::Config("corrupt RNG state in checkpoint".into());
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_mae: f64,
    pub val_mean_f_beta: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub config_hash: String,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub log: EpochLog,
}

/// Model, configuration and training progress restored from disk.
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Rst,
    pub state: TrainState,
    pub dir: PathBuf,
}

pub fn epoch_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch:03}"))
}

/// Highest-numbered `epoch_NNN` directory under `out`.
pub fn latest_epoch(out: &Path) -> Option<(usize, PathBuf)> {
    let mut best = None;
    for e in fs::read_dir(out).ok()?.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("epoch_").and_then(|n| n.parse::<usize>().ok()) {
            if e.path().join("state.json").is_file() && best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, e.path()));
            }
        }
    }
    best
}

impl Checkpoint {
    /// Load an `epoch_NNN` directory, or the latest one under a run directory.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let dir = if path.join("state.json").is_file() {
            path.to_path_buf()
        } else {
            latest_epoch(path).map(|(_, d)| d).ok_or_else(|| TrainError::NoCheckpoint(path.to_path_buf()))?
        };
        let config: RunConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        let state: TrainState = serde_json::from_slice(&fs::read(dir.join("state.json"))?)?;
        let mut model = Rst::new(config.model.clone(), config.seed)?;
        model.store.load_container(&TensorContainer::load(&dir, "params")?)?;
        Ok(Self { config, model, state, dir })
    }

    fn save(dir: &Path, cfg: &RunConfig, model: &Rst, opt: &AdamW, state: &TrainState) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        model.store.to_container().save(dir, "params")?;
        opt.to_container().save(dir, "optimizer")?;
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
        fs::write(dir.join("state.json"), serde_json::to_vec_pretty(state)?)?;
        Ok(())
    }
}

/// The map a readout policy scores from per-step maps.
pub fn readout_map(maps: &[Tensor], readout: Readout) -> Tensor {
    match readout {
        Readout::Mean if maps.len() > 1 => {
            let mut acc = maps[0].clone();
            for m in &maps[1..] {
                acc.add_assign(m);
            }
            acc.map(|v| v / maps.len() as f64)
        }
        Readout::Mean | Readout::Final | Readout::Auto => maps.last().expect("at least one step").clone(),
    }
}

/// Score `model` on every sequence of `ds` whose split passes `keep`.
///
/// Multi-step mode scores each label independently; single-step mode walks
/// each sequence in frame order with potentials carried across labels.
pub fn evaluate(model: &mut Rst, ds: &Dataset, keep: impl Fn(Split) -> bool, mode: Mode, readout: Readout, batch: usize) -> Result<EvalReport, TrainError> {
    let mut ev = Evaluator::new();
    for seq in ds.sequences.iter().filter(|s| keep(s.split)) {
        match mode {
            Mode::MultiStep => {
                for chunk in seq.samples.chunks(batch.max(1)) {
                    let reprs: Vec<_> = chunk.iter().map(|&i| &ds.samples[i].repr).collect();
                    let maps = model.predict(&reprs, mode, &mut NeuronState::new(), None)?;
                    let out = readout_map(&maps, readout);
                    let px = out.len() / chunk.len();
                    for (j, &i) in chunk.iter().enumerate() {
                        let m = &ds.samples[i].mask;
                        ev.add(&seq.name, &out.data()[j * px..(j + 1) * px], &m.values, m.width, m.height)?;
                    }
                }
            }
            Mode::SingleStep => {
                let mut state = NeuronState::new();
                for &i in &seq.samples {
                    let s = &ds.samples[i];
                    let maps = model.predict(&[&s.repr], mode, &mut state, None)?;
                    ev.add(&seq.name, maps[0].data(), &s.mask.values, s.mask.width, s.mask.height)?;
                }
            }
        }
    }
    Ok(ev.finish()?)
}

fn mask_batch(ds: &Dataset, idx: &[usize]) -> Tensor {
    let m = &ds.samples[idx[0]].mask;
    let data = idx.iter().flat_map(|&i| ds.samples[i].mask.values.iter().map(|&v| v as f64)).collect();
    Tensor::new(&[idx.len(), 1, m.height, m.width], data).expect("mask batch")
}

/// One optimisation step on a batch; returns the loss value.
fn step(model: &mut Rst, opt: &mut AdamW, cfg: &RunConfig, lr: f64, ds: &Dataset, idx: &[usize], state: &mut NeuronState) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let reprs: Vec<_> = idx.iter().map(|&i| &ds.samples[i].repr).collect();
    let input = tape.constant(batch_input(&reprs)?);
    let target = tape.constant(mask_batch(ds, idx));
    let steps = cfg.model.steps_for(cfg.mode);
    let out = model.forward(&tape, input, steps, true, state, None)?;
    let maps: Vec<Var<'_>> = out.step_maps()?;
    let loss = if steps == 1 { map_loss(maps[0], target, &cfg.loss)? } else { step_loss(&maps, target, &cfg.loss)? };
    tape.backward(loss)?;
    model.store.zero_grad();
    model.store.collect_grads(&tape);
    opt.update(&mut model.store, &cfg.optimizer, lr);
    Ok(loss.value().item())
}

fn train_epoch(model: &mut Rst, opt: &mut AdamW, cfg: &RunConfig, lr: f64, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let train_seqs: Vec<usize> = (0..ds.sequences.len()).filter(|&s| ds.sequences[s].split == Split::Train).collect();
    let mut losses = Vec::new();
    match cfg.mode {
        Mode::MultiStep => {
            let mut idx: Vec<usize> = train_seqs.iter().flat_map(|&s| ds.sequences[s].samples.iter().copied()).collect();
            idx.shuffle(rng);
            for chunk in idx.chunks(cfg.batch_size) {
                losses.push(step(model, opt, cfg, lr, ds, chunk, &mut NeuronState::new())?);
            }
        }
        Mode::SingleStep => {
            let mut seqs = train_seqs;
            seqs.shuffle(rng);
            for group in seqs.chunks(cfg.batch_size) {
                let len = group.iter().map(|&s| ds.sequences[s].samples.len()).min().unwrap_or(0);
                let mut state = NeuronState::new();
                for j in 0..len {
                    let idx: Vec<usize> = group.iter().map(|&s| ds.sequences[s].samples[j]).collect();
                    losses.push(step(model, opt, cfg, lr, ds, &idx, &mut state)?);
                }
            }
        }
    }
    if losses.is_empty() {
        return Err(TrainError::Config("the training split is empty".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many epochs in total.
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

/// Train per `cfg`, writing `epoch_NNN/` checkpoints, `config.json` and
/// `metrics.csv` under `out`. Returns the log of the epochs run.
pub fn train(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    let ds = cfg.load_split(None)?;
    train_on(cfg, &ds, out, opts)
}

/// [`train`] on an already loaded dataset.
pub fn train_on(cfg: &RunConfig, ds: &Dataset, out: &Path, opts: &TrainOptions) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let mut model = Rst::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut first = 0;
    let csv = out.join("metrics.csv");
    if opts.resume {
        if let Some((_, dir)) = latest_epoch(out) {
            let ck = Checkpoint::load(&dir)?;
            if ck.state.config_hash != hash {
                return Err(TrainError::ResumeMismatch { dir, expected: hash, found: ck.state.config_hash });
            }
            model = ck.model;
            opt.load_container(&TensorContainer::load(&dir, "optimizer")?, ck.state.optimizer_step)?;
            rng = ck.state.rng.restore()?;
            first = ck.state.epoch;
            truncate_csv(&csv, first)?;
        }
    }
    if first == 0 {
        fs::write(&csv, "epoch,loss,val_mae,val_mean_f_beta,lr\n")?;
    }
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    let has_val = ds.sequences.iter().any(|s| s.split == Split::Val);
    let last = opts.stop_after.unwrap_or(cfg.optimizer.epochs).min(cfg.optimizer.epochs);
    let mut logs = Vec::new();
    for epoch in first..last {
        let lr = cfg.optimizer.lr(epoch);
        let loss = train_epoch(&mut model, &mut opt, cfg, lr, ds, &mut rng)?;
        let (val_mae, val_f) = if has_val {
            let r = evaluate(&mut model, ds, |s| s == Split::Val, cfg.mode, cfg.readout(), cfg.batch_size)?;
            (r.overall.mae, r.overall.mean_f_beta)
        } else {
            (f64::NAN, f64::NAN)
        };
        let log = EpochLog { epoch: epoch + 1, loss, val_mae, val_mean_f_beta: val_f, lr };
        if opts.verbose {
            eprintln!("epoch {:>3}  loss {:.6}  val mae {:.4}  val mF {:.4}  lr {:.2e}", log.epoch, loss, val_mae, val_f, lr);
        }
        let state = TrainState { epoch: epoch + 1, config_hash: hash.clone(), optimizer_step: opt.step, rng: RngState::capture(&rng), log: log.clone() };
        Checkpoint::save(&epoch_dir(out, epoch + 1), cfg, &model, &opt, &state)?;
        let mut f = fs::OpenOptions::new().append(true).open(&csv)?;
        writeln!(f, "{},{:.17e},{:.17e},{:.17e},{:.17e}", log.epoch, log.loss, log.val_mae, log.val_mean_f_beta, log.lr)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Keep the header and the first `epochs` rows.
fn truncate_csv(path: &Path, epochs: usize) -> Result<(), TrainError> {
    let text = fs::read_to_string(path).unwrap_or_else(|_| "epoch,loss,val_mae,val_mean_f_beta,lr\n".into());
    let kept: Vec<&str> = text.lines().take(epochs + 1).collect();
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}
