//! Gradient-accumulating Adam training with per-epoch validation, best/last
//! checkpoints and exact resume.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{format_float, TrainConfig};
use super::dataset::{mix_seed, simulate_projections, Dataset};
use crate::data::{augment, normalize_hu, Volume};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, Model, NamedTensors};
use crate::projector::ProjectionStack;
use crate::tensor::{l1_loss_value, Adam, AdamState, BatchNormMode, Domain, Graph, Tensor};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RUN_MANIFEST: &str = "run_manifest.txt";

/// Ground truth and measured projections held in memory.
pub struct Sample {
    pub id: usize,
    pub volume: Volume<f32>,
    pub projections: ProjectionStack<f32>,
}

pub struct TrainingData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

impl TrainingData {
    pub fn load(ds: &Dataset) -> Result<Self> {
        let load = |ids: &[usize]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|&id| Ok(Sample { id, volume: ds.volume(id)?, projections: ds.projections(id)? }))
                .collect()
        };
        Ok(Self { train: load(&ds.manifest.train)?, validation: load(&ds.manifest.validation)? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` without a validation split.
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model<f32>,
    adam: Adam,
    state: AdamState<f32>,
    epoch: usize,
    step: usize,
    best: Option<(usize, f64)>,
    norm_mode: BatchNormMode,
    history: Vec<(f64, Option<f64>)>,
}

fn target_tensor(volumes: &[Volume<f32>]) -> Result<Tensor<f32>> {
    let g = volumes[0].grid;
    let mut data = Vec::with_capacity(volumes.len() * g.len());
    for v in volumes {
        data.extend_from_slice(normalize_hu(v)?.values());
    }
    Tensor::new(vec![volumes.len(), 1, g.nz, g.ny, g.nx], data)
}

fn meta_num<N: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<N> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Invalid(format!("checkpoint lacks a valid {key}")))
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.sparse_geometry()?, cfg.grid()?, cfg.seed)?;
        let state = AdamState::new(model.params().tensors());
        Ok(Self { adam: cfg.adam(), cfg, model, state, epoch: 0, step: 0, best: None, norm_mode: BatchNormMode::Train, history: vec![] })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// schedule and optimizer settings come from `cfg`; its model and
    /// geometry must match the checkpoint.
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let (saved, meta) = TrainConfig::parse_with_meta(&ck.config_text, true)?;
        if saved.model != cfg.model {
            return Err(Error::Invalid("checkpoint model settings differ from the config".into()));
        }
        let mut t = Self::new(cfg)?;
        let fp: String = meta_num(&meta, "checkpoint.geometry")?;
        if fp != t.model.fingerprint() {
            return Err(Error::Fingerprint { checkpoint: fp, data: t.model.fingerprint() });
        }
        t.model.load_named(&ck.tensors)?;
        t.epoch = meta_num(&meta, "checkpoint.epoch")?;
        t.step = meta_num(&meta, "checkpoint.step")?;
        if let (Some(e), Some(v)) = (meta.get("checkpoint.best_epoch"), meta.get("checkpoint.best_val_loss")) {
            let e = e.parse().map_err(|_| Error::Invalid("bad checkpoint.best_epoch".into()))?;
            let v = v.parse().map_err(|_| Error::Invalid("bad checkpoint.best_val_loss".into()))?;
            t.best = Some((e, v));
        }
        for e in 0..t.epoch {
            let Some(line) = meta.get(&format!("checkpoint.history.{e}")) else { break };
            let mut it = line.split_whitespace().map(|s| s.parse::<f64>().ok());
            let train = it.next().flatten().unwrap_or(f64::NAN);
            t.history.push((train, it.next().flatten()));
        }
        if let Some(opt) = &ck.optimizer {
            t.state = adam_state_from(&t.model, opt)?;
        }
        Ok(t)
    }

    /// Batch-norm mode of training steps. Eval mode makes a step independent
    /// of how the batch is split into micro-batches.
    pub fn set_norm_mode(&mut self, mode: BatchNormMode) {
        self.norm_mode = mode;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<f32> {
        &mut self.model
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.cfg.effective_batch)
    }

    /// Sample order of one epoch, a pure function of seed and epoch.
    pub fn epoch_order(&self, n_train: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, epoch as u64)));
        order
    }

    /// Training pair for one sample: augmented volume re-projected, or the
    /// stored scan when augmentation is off.
    fn pair(&self, s: &Sample, epoch: usize) -> Result<(ProjectionStack<f32>, Volume<f32>)> {
        if !self.cfg.augment.enabled {
            return Ok((s.projections.clone(), s.volume.clone()));
        }
        let seed = mix_seed(mix_seed(self.cfg.seed ^ 0xA5A5, epoch as u64), s.id as u64);
        let v = augment(&s.volume, seed, &self.cfg.augment)?;
        let p = simulate_projections(&v, &self.cfg.full_geometry()?, self.cfg.sparse_factor)?;
        Ok((p, v))
    }

    /// One optimizer step over `batch` (indices into `data.train`),
    /// accumulating micro-batch gradients. Returns the mean sample loss.
    pub fn train_step(&mut self, data: &TrainingData, batch: &[usize], epoch: usize) -> Result<f64> {
        self.model.params_mut().zero_grad();
        let mut total = 0.0;
        for mb in batch.chunks(self.cfg.micro_batch) {
            let pairs: Vec<_> = mb.iter().map(|&i| self.pair(&data.train[i], epoch)).collect::<Result<_>>()?;
            let stacks: Vec<&ProjectionStack<f32>> = pairs.iter().map(|(p, _)| p).collect();
            let input = self.model.batch_projections(&stacks)?;
            let vols: Vec<Volume<f32>> = pairs.iter().map(|(_, v)| v.clone()).collect();
            let mut g = Graph::new();
            // diverged parameters surface as non-finite operator inputs
            let out = self.model.forward(&mut g, input, self.norm_mode, true).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step: self.step + 1, lr: self.cfg.lr },
                e => e,
            })?;
            let target = g.input(target_tensor(&vols)?, Domain::Volume);
            let loss = g.l1_loss(out.output, target)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.step + 1, lr: self.cfg.lr });
            }
            let w = mb.len() as f64 / batch.len() as f64;
            total += w * value;
            let scaled = g.scale(loss, w as f32);
            g.backward(scaled)?;
            self.model.params_mut().accumulate_grads(&g)?;
        }
        self.adam.step(self.model.params_mut().tensors_mut(), &mut self.state)?;
        self.step += 1;
        Ok(total)
    }

    /// Mean eval-mode L1 loss over samples (stored scans, no augmentation).
    pub fn evaluate_loss(&mut self, samples: &[Sample]) -> Result<f64> {
        let mut sum = 0.0;
        for s in samples {
            let input = self.model.batch_projections(&[&s.projections])?;
            let mut g = Graph::new();
            let out = self.model.forward(&mut g, input, BatchNormMode::Eval, false).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step: self.step, lr: self.cfg.lr },
                e => e,
            })?;
            sum += l1_loss_value(g.value(out.output).data(), normalize_hu(&s.volume)?.values())?;
        }
        Ok(sum / samples.len().max(1) as f64)
    }

    /// Trains one epoch and validates.
    pub fn run_epoch(&mut self, data: &TrainingData) -> Result<EpochLog> {
        if data.train.is_empty() {
            return Err(Error::Invalid("training split is empty".into()));
        }
        let t0 = Instant::now();
        let epoch = self.epoch;
        let order = self.epoch_order(data.train.len(), epoch);
        let mut sum = 0.0;
        for batch in order.chunks(self.cfg.effective_batch) {
            sum += self.train_step(data, batch, epoch)? * batch.len() as f64;
        }
        let train_loss = sum / order.len() as f64;
        let val_loss = if data.validation.is_empty() { None } else { Some(self.evaluate_loss(&data.validation)?) };
        let score = val_loss.unwrap_or(train_loss);
        if self.best.is_none_or(|(_, b)| score < b) {
            self.best = Some((epoch, score));
        }
        self.epoch += 1;
        self.history.push((train_loss, val_loss));
        Ok(EpochLog { epoch, train_loss, val_loss, seconds: t0.elapsed().as_secs_f64() })
    }

    /// True when the epoch just finished set a new best score.
    pub fn last_epoch_was_best(&self) -> bool {
        self.best.is_some_and(|(e, _)| e + 1 == self.epoch)
    }

    /// Parameters, statistics, Adam state and the resolved config with
    /// progress metadata. Contains nothing run-dependent beyond the data.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut text = self.cfg.serialize();
        let _ = writeln!(text, "checkpoint.epoch = {}", self.epoch);
        let _ = writeln!(text, "checkpoint.step = {}", self.step);
        let _ = writeln!(text, "checkpoint.geometry = {}", self.model.fingerprint());
        if let Some((e, v)) = self.best {
            let _ = writeln!(text, "checkpoint.best_epoch = {e}");
            let _ = writeln!(text, "checkpoint.best_val_loss = {v}");
        }
        for (e, (tr, va)) in self.history.iter().enumerate() {
            let va = va.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(text, "checkpoint.history.{e} = {tr} {va}");
        }
        Checkpoint { config_text: text, tensors: self.model.named_tensors(), optimizer: Some(adam_state_to(&self.model, &self.state)) }
    }
}

fn adam_state_to(model: &Model<f32>, st: &AdamState<f32>) -> NamedTensors {
    let p = model.params();
    let mut out = Vec::with_capacity(2 * p.len() + 1);
    for (i, name) in p.names().iter().enumerate() {
        let shape = p.tensor(i).shape().to_vec();
        out.push((format!("{name}.adam_m"), Tensor::new(shape.clone(), st.first_moment[i].clone()).expect("moment size")));
        out.push((format!("{name}.adam_v"), Tensor::new(shape, st.second_moment[i].clone()).expect("moment size")));
    }
    out.push(("adam.step".into(), Tensor::new(vec![1], vec![st.step as f32]).expect("scalar")));
    out
}

fn adam_state_from(model: &Model<f32>, opt: &NamedTensors) -> Result<AdamState<f32>> {
    let find = |n: &str| {
        opt.iter()
            .find(|(k, _)| k == n)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Invalid(format!("optimizer state lacks {n}")))
    };
    let p = model.params();
    let mut st = AdamState::new(p.tensors());
    for (i, name) in p.names().iter().enumerate() {
        for (suffix, slot) in [("adam_m", &mut st.first_moment[i]), ("adam_v", &mut st.second_moment[i])] {
            let t = find(&format!("{name}.{suffix}"))?;
            if t.numel() != slot.len() {
                return Err(Error::Shape(format!("{name}.{suffix} has {} values, expected {}", t.numel(), slot.len())));
            }
            slot.copy_from_slice(t.data());
        }
    }
    st.step = find("adam.step")?.data()[0] as u64;
    Ok(st)
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub epochs: Vec<EpochLog>,
    pub best: Option<(usize, f64)>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub manifest: PathBuf,
}

/// Trains on a simulated dataset, writing `last.ckpt`, `best.ckpt` and a run
/// manifest into `out`. `progress` sees every finished epoch.
pub fn train(
    cfg: &TrainConfig,
    data_dir: impl AsRef<Path>,
    out: impl AsRef<Path>,
    resume: Option<&Path>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<RunSummary> {
    let t0 = Instant::now();
    let ds = Dataset::open(data_dir.as_ref())?;
    ds.check_config(cfg)?;
    if ds.manifest.sparse_factor != cfg.sparse_factor {
        return Err(Error::Invalid("dataset sparse factor differs from the config".into()));
    }
    let data = TrainingData::load(&ds)?;
    let out = out.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg.clone(), &Checkpoint::load(path)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let last = out.join(LAST_CHECKPOINT);
    let best = out.join(BEST_CHECKPOINT);
    let mut logs = Vec::new();
    while trainer.epoch() < cfg.epochs {
        let log = trainer.run_epoch(&data)?;
        progress(&log);
        let done = trainer.epoch() == cfg.epochs;
        if trainer.last_epoch_was_best() || done || trainer.epoch() % cfg.checkpoint_every == 0 {
            let ck = trainer.checkpoint();
            if trainer.last_epoch_was_best() {
                ck.save(&best)?;
            }
            if done || trainer.epoch() % cfg.checkpoint_every == 0 {
                ck.save(&last)?;
            }
        }
        logs.push(log);
    }
    if !last.exists() {
        trainer.checkpoint().save(&last)?;
    }
    let manifest = out.join(RUN_MANIFEST);
    let text = run_manifest(&trainer, &ds, &data, &logs, t0.elapsed().as_secs_f64());
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(RunSummary { epochs: logs, best: trainer.best(), last_checkpoint: last, best_checkpoint: best, manifest })
}

fn run_manifest(t: &Trainer, ds: &Dataset, data: &TrainingData, logs: &[EpochLog], seconds: f64) -> String {
    let mut s = t.config().serialize();
    let m = t.model();
    let _ = writeln!(s, "run.data = {}", ds.dir.display());
    let _ = writeln!(s, "run.geometry = {}", m.fingerprint());
    let _ = writeln!(s, "run.parameters = {}", m.params().count());
    let _ = writeln!(s, "run.n_train = {}", data.train.len());
    let _ = writeln!(s, "run.n_validation = {}", data.validation.len());
    let _ = writeln!(s, "run.steps_per_epoch = {}", t.steps_per_epoch(data.train.len()));
    let _ = writeln!(s, "run.steps = {}", t.step());
    let _ = writeln!(s, "run.threads = {}", rayon::current_num_threads());
    for l in logs {
        let _ = writeln!(s, "run.epoch.{}.train_loss = {}", l.epoch, l.train_loss);
        if let Some(v) = l.val_loss {
            let _ = writeln!(s, "run.epoch.{}.val_loss = {v}", l.epoch);
        }
        let _ = writeln!(s, "run.epoch.{}.seconds = {}", l.epoch, format_float(l.seconds));
    }
    if let Some((e, v)) = t.best() {
        let _ = writeln!(s, "run.best_epoch = {e}");
        let _ = writeln!(s, "run.best_val_loss = {v}");
    }
    let _ = writeln!(s, "run.seconds = {}", format_float(seconds));
    s
}
