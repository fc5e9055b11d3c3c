//! Optimizers, learning-rate schedules and the training loop.

mod optim;
mod schedule;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gaitforge_tensor::{Checkpoint, Mode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use schedule::{lr_at, ScheduleConfig, ScheduleKind, DEFAULT_GAMMA, DEFAULT_GRANULARITY};

use crate::backbone::Family;
use crate::config::KeyValues;
use crate::data::{sample_batch_with, AugmentPolicy, BatchSpec, Dataset};
use crate::error::{config, GaitError, Result};
use crate::head::{combined_loss, LossConfig};
use crate::model::{GaitModel, ModelConfig};
use crate::params::{LrGroup, Session};

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch: BatchSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub log_every: usize,
    /// 0 writes only the initial and final checkpoints.
    pub checkpoint_every: usize,
    /// DeepGaitV2 checkpoint to warm-start a SwinGait model from.
    pub warm_start: Option<PathBuf>,
}

impl TrainConfig {
    /// The recipe for the model's family: SGD with multi-step decay for the
    /// convolutional models, AdamW with cosine annealing for SwinGait.
    /// Unordered sampling for the 2D families.
    pub fn recipe(model: ModelConfig, batch: BatchSpec, total_steps: usize) -> Self {
        let family = model.backbone.family;
        let (optimizer, schedule) = if family.is_swin() {
            (OptimizerConfig::adamw(), ScheduleConfig::cosine(total_steps.max(1), total_steps))
        } else {
            // Milestones at 1/3, 2/3 and 5/6 of the run.
            let mut m: Vec<usize> = [2, 4, 5].iter().map(|i| total_steps * i / 6).filter(|&m| m > 0).collect();
            m.dedup();
            (OptimizerConfig::sgd(), ScheduleConfig::multistep(m, total_steps))
        };
        let ordered = !matches!(family, Family::DeepGaitV2_2D | Family::SwinGait2D);
        TrainConfig {
            model,
            batch: BatchSpec { ordered, ..batch },
            optimizer,
            schedule,
            loss: LossConfig::default(),
            augment: AugmentPolicy::default(),
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
            warm_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.batch.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.loss.triplet_margin < 0.0 {
            return config("triplet_margin must be >= 0");
        }
        Ok(())
    }

    /// Parses `key = value` text. Model keys are those of [`ModelConfig`];
    /// everything else falls back to the family recipe.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let model = ModelConfig::from_kv(&mut kv)?;
        let total = kv.take_parsed("total_steps")?.unwrap_or(1000);
        let mut batch = BatchSpec::new(kv.take_parsed("q")?.unwrap_or(8), kv.take_parsed("k")?.unwrap_or(4));
        if let Some(t) = kv.take_parsed("frames")? {
            batch.frames = t;
        }
        let mut cfg = TrainConfig::recipe(model, batch, total);
        if let Some(o) = kv.take_parsed("ordered")? {
            cfg.batch.ordered = o;
        }
        if let Some(kind) = kv.take("optimizer") {
            let kind: OptimizerKind = kind.parse()?;
            if kind != cfg.optimizer.kind {
                cfg.optimizer = match kind {
                    OptimizerKind::Sgd => OptimizerConfig::sgd(),
                    OptimizerKind::AdamW => OptimizerConfig::adamw(),
                };
            }
        }
        let o = &mut cfg.optimizer;
        for (key, slot) in [
            ("lr", &mut o.lr),
            ("weight_decay", &mut o.weight_decay),
            ("momentum", &mut o.momentum),
            ("beta1", &mut o.betas.0),
            ("beta2", &mut o.betas.1),
            ("eps", &mut o.eps),
            ("lr_min", &mut o.lr_min),
            ("warm_start_lr_scale", &mut o.warm_start_scale),
        ] {
            if let Some(v) = kv.take_parsed(key)? {
                *slot = v;
            }
        }
        if let Some(kind) = kv.take("schedule") {
            cfg.schedule.kind = match kind.as_str() {
                "multistep" => ScheduleKind::MultiStep { milestones: Vec::new(), gamma: DEFAULT_GAMMA },
                "cosine" => ScheduleKind::Cosine { i_max: total.max(1), granularity: DEFAULT_GRANULARITY },
                other => return config(format!("unknown schedule '{}'", other)),
            };
        }
        match &mut cfg.schedule.kind {
            ScheduleKind::MultiStep { milestones, gamma } => {
                if let Some(m) = kv.take_list("milestones")? {
                    *milestones = m;
                }
                if let Some(g) = kv.take_parsed("gamma")? {
                    *gamma = g;
                }
            }
            ScheduleKind::Cosine { i_max, granularity } => {
                if let Some(i) = kv.take_parsed("i_max")? {
                    *i_max = i;
                }
                if let Some(g) = kv.take_parsed("lr_granularity")? {
                    *granularity = g;
                }
            }
        }
        if let Some(m) = kv.take_parsed("triplet_margin")? {
            cfg.loss.triplet_margin = m;
        }
        if let Some(a) = kv.take("augment") {
            cfg.augment = match a.as_str() {
                "default" => AugmentPolicy::default(),
                "none" => AugmentPolicy::none(),
                other => return config(format!("augment must be 'default' or 'none', got '{}'", other)),
            };
        }
        let a = &mut cfg.augment;
        for (key, slot) in [
            ("aug_flip", &mut a.flip),
            ("aug_rotate", &mut a.rotate),
            ("aug_perspective", &mut a.perspective),
            ("aug_erase", &mut a.erase),
        ] {
            if let Some(v) = kv.take_parsed(key)? {
                *slot = v;
            }
        }
        if let Some(s) = kv.take_parsed("seed")? {
            cfg.seed = s;
        }
        if let Some(v) = kv.take_parsed("log_every")? {
            cfg.log_every = v;
        }
        if let Some(v) = kv.take_parsed("checkpoint_every")? {
            cfg.checkpoint_every = v;
        }
        cfg.warm_start = kv.take("warm_start").map(PathBuf::from);
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One optimisation step as logged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub triplet: f64,
    pub ce: f64,
    pub nonzero: usize,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "step={} lr={:.6e} l_tri={:.6} l_ce={:.6} nzt={}",
            self.step, self.lr, self.triplet, self.ce, self.nonzero
        )
    }
}

/// Receives log records and checkpoints from [`train`].
pub trait TrainObserver {
    fn header(&mut self, _line: &str) -> Result<()> {
        Ok(())
    }

    fn record(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// `step` is the number of completed steps.
    fn checkpoint(&mut self, _step: usize, _model: &GaitModel<f32>) -> Result<()> {
        Ok(())
    }

    /// Polled after every step; `true` ends the run early.
    fn should_stop(&self, _last: &StepRecord) -> bool {
        false
    }
}

/// Keeps records and checkpoints in memory.
#[derive(Debug, Default)]
pub struct MemoryObserver {
    pub header: Vec<String>,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<(usize, Checkpoint)>,
}

impl TrainObserver for MemoryObserver {
    fn header(&mut self, line: &str) -> Result<()> {
        self.header.push(line.to_string());
        Ok(())
    }

    fn record(&mut self, record: &StepRecord) -> Result<()> {
        self.records.push(*record);
        Ok(())
    }

    fn checkpoint(&mut self, step: usize, model: &GaitModel<f32>) -> Result<()> {
        self.checkpoints.push((step, model.to_checkpoint()));
        Ok(())
    }
}

/// Writes `train.log` and `ckpt-<step>.gfc` files into a directory.
pub struct DirObserver {
    dir: PathBuf,
    log: BufWriter<File>,
    echo: bool,
}

impl DirObserver {
    pub fn create(dir: impl AsRef<Path>, echo: bool) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let log = BufWriter::new(File::create(dir.join("train.log"))?);
        Ok(DirObserver { dir, log, echo })
    }

    pub fn checkpoint_path(dir: impl AsRef<Path>, step: usize) -> PathBuf {
        dir.as_ref().join(format!("ckpt-{:06}.gfc", step))
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.log, "{}", line)?;
        self.log.flush()?;
        if self.echo {
            println!("{}", line);
        }
        Ok(())
    }
}

impl TrainObserver for DirObserver {
    fn header(&mut self, line: &str) -> Result<()> {
        self.line(line)
    }

    fn record(&mut self, record: &StepRecord) -> Result<()> {
        self.line(&record.log_line())
    }

    fn checkpoint(&mut self, step: usize, model: &GaitModel<f32>) -> Result<()> {
        model.save(Self::checkpoint_path(&self.dir, step))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: Option<StepRecord>,
}

/// Learning rates of both groups at `step`.
pub fn group_rates(cfg: &TrainConfig, step: usize) -> Result<(f64, f64)> {
    let o = &cfg.optimizer;
    let base = lr_at(step, &cfg.schedule, o.lr, o.lr_min)?;
    let s = o.group_scale(LrGroup::WarmStart);
    let warm = lr_at(step, &cfg.schedule, o.lr * s, o.lr_min * s)?;
    Ok((base, warm))
}

/// Runs `cfg.schedule.total_steps` optimisation steps on `model`.
///
/// An initial checkpoint is written before the first step, further ones
/// every `checkpoint_every` steps and a final one at the end, also when the
/// observer stops the run early. Given the
/// same seeds the run is bit-reproducible.
pub fn train(
    model: &mut GaitModel<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let subjects = dataset.subjects().len();
    if model.config.num_classes < subjects {
        return config(format!(
            "model has {} classes but the dataset has {} subjects",
            model.config.num_classes, subjects
        ));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.schedule.total_steps;

    observer.header(&format!(
        "model={} C={} B={:?} {} schedule={} total_steps={} batch=({}, {}) frames={} ordered={}",
        model.config.backbone.family,
        model.config.backbone.base_channels,
        model.config.backbone.block_counts,
        cfg.optimizer.describe(),
        cfg.schedule.name(),
        total,
        cfg.batch.q,
        cfg.batch.k,
        cfg.batch.frames,
        cfg.batch.ordered
    ))?;
    observer.checkpoint(0, model)?;

    let (mut last, mut done) = (None, 0);
    for step in 0..total {
        let (base_lr, warm_lr) = group_rates(cfg, step)?;
        let batch = sample_batch_with(dataset, &cfg.batch, &cfg.augment, &mut rng)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.clips);
        let mut s = Session::new(&mut tape, &model.store, Mode::Train, rng.gen());
        let out = model.forward(&mut s, x)?;
        let loss = combined_loss(s.tape, &out.head, &batch.labels, &cfg.loss)?;
        let bindings = s.finish();
        if !(loss.triplet.is_finite() && loss.ce.is_finite()) {
            return Err(GaitError::Diverged { step });
        }
        tape.backward(loss.total)?;
        let grads = bindings.grads(&mut tape);
        drop(tape);
        model.store.apply_stats(&bindings.updates);
        optimizer.step(&mut model.store, &grads, |g| match g {
            LrGroup::Base => base_lr,
            LrGroup::WarmStart => warm_lr,
        })?;

        let rec = StepRecord { step, lr: base_lr, triplet: loss.triplet, ce: loss.ce, nonzero: loss.nonzero };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total) {
            observer.record(&rec)?;
        }
        last = Some(rec);
        done = step + 1;
        if observer.should_stop(&rec) {
            break;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != total {
            observer.checkpoint(done, model)?;
        }
    }
    if done > 0 {
        observer.checkpoint(done, model)?;
    }
    Ok(TrainSummary { steps: done, last })
}
