use std::io::Write;
use std::path::{Path, PathBuf};

use dbat_tensor::{Graph, ParamStore, Precision};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{DbatError, Result};
use crate::layers::Ctx;
use crate::model::Dbat;
use crate::seghead::{self, MetricsReport};
use crate::train::adamw::AdamW;
use crate::train::checkpoint::{save_checkpoint, Checkpoint};
use crate::train::data::{batch_at, Batch, SceneSpec};
use crate::train::schedule::{lr_at, TrainConfig};

/// Data stream offset so training scenes never coincide with evaluation
/// scenes drawn from the same seed.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub struct Trainer {
    pub model: Dbat,
    pub store: ParamStore,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    /// Completed optimization steps.
    pub step: u64,
}

impl Trainer {
    /// Fresh model initialized from `train.seed`.
    pub fn new(model_cfg: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        model_cfg.encoder.validate_input(train.crop, train.crop)?;
        let (model, store) = Dbat::new(model_cfg, train.crop, train.seed)?;
        let opt = AdamW::new(&store, train.beta1, train.beta2, train.adam_eps, train.weight_decay);
        Ok(Self {
            model,
            store,
            opt,
            cfg: train.clone(),
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, store) = ckpt.restore()?;
        Ok(Self {
            model,
            store,
            opt: ckpt.optimizer.clone(),
            cfg: ckpt.header.train.clone(),
            step: ckpt.header.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model, &self.store, &self.opt, &self.cfg, self.step, self.cfg.seed)
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            num_classes: self.model.cfg.num_classes,
            crop: self.cfg.crop,
            ignore_fraction: self.cfg.ignore_fraction,
            preset: self.cfg.preset,
        }
    }

    /// The synthetic batch consumed by step `step` (1-based).
    pub fn training_batch(&self, step: u64) -> Result<Batch> {
        batch_at(self.cfg.seed ^ TRAIN_STREAM, step, self.cfg.batch_size, self.scene_spec())
    }

    /// One optimization step on `batch` at the schedule's next learning rate.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.step + 1;
        let lr = lr_at(step as usize, &self.cfg)?;
        let graph = Graph::new(Precision::Single);
        let ctx = Ctx::new(&graph, &self.store);
        let image = graph.constant(batch.images.clone());
        let out = self.model.forward(&ctx, &image)?;
        let loss = seghead::loss(&out.logits, &batch.labels)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(DbatError::NonFiniteLoss {
                step: step as usize,
                loss: value,
            });
        }
        let grads = graph.backward(loss)?;
        drop(ctx);
        self.opt.step(&mut self.store, &grads, lr)?;
        self.step = step;
        Ok(StepRecord { step, lr, loss: value })
    }
}

/// Where and how often [`train_loop`] writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    pub every: usize,
}

impl CheckpointPolicy {
    pub fn path_for(dir: &Path, step: u64) -> PathBuf {
        dir.join(format!("step_{step:06}.dbat"))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Train until `until` steps are complete (at most `total_steps`), pulling
/// batches from `data` by step number. Each step is appended to `log_out`
/// as one JSON line. The final state is written to `final.dbat` when a
/// checkpoint directory is configured.
pub fn train_loop<F>(trainer: &mut Trainer, until: u64, mut data: F, log_out: &mut dyn Write, policy: &CheckpointPolicy) -> Result<TrainOutcome>
where
    F: FnMut(&Trainer, u64) -> Result<Batch>,
{
    let until = until.min(trainer.cfg.total_steps as u64);
    let mut log = Vec::new();
    while trainer.step < until {
        let batch = data(trainer, trainer.step + 1)?;
        let rec = trainer.step_on(&batch)?;
        serde_json::to_writer(&mut *log_out, &rec)?;
        log_out.write_all(b"\n")?;
        if let Some(dir) = &policy.dir {
            if policy.every > 0 && rec.step % policy.every as u64 == 0 {
                save_checkpoint(&trainer.checkpoint(), &CheckpointPolicy::path_for(dir, rec.step))?;
            }
        }
        log.push(rec);
    }
    log_out.flush()?;
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &policy.dir {
        save_checkpoint(&checkpoint, &dir.join("final.dbat"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// [`train_loop`] over the trainer's own synthetic stream.
pub fn train_synthetic(trainer: &mut Trainer, until: u64, log_out: &mut dyn Write, policy: &CheckpointPolicy) -> Result<TrainOutcome> {
    train_loop(trainer, until, |t, step| t.training_batch(step), log_out, policy)
}

/// Metrics of `model` over `batches`.
pub fn evaluate(model: &Dbat, store: &ParamStore, batches: &[Batch]) -> Result<MetricsReport> {
    let k = model.cfg.num_classes;
    let mut report: Option<MetricsReport> = None;
    for b in batches {
        let graph = Graph::new(Precision::Single);
        let ctx = Ctx::new(&graph, store);
        let out = model.forward(&ctx, &graph.constant(b.images.clone()))?;
        let pred = seghead::predict(&out.logits.value())?;
        let r = seghead::metrics(&pred, &b.labels, k)?;
        report = Some(match report {
            None => r,
            Some(acc) => acc.merge(&r)?,
        });
    }
    report.ok_or_else(|| DbatError::Argument("no evaluation batches".into()))
}

/// `count` held-out batches drawn from `seed` with the given scene spec.
pub fn eval_batches(seed: u64, count: usize, batch_size: usize, spec: SceneSpec) -> Result<Vec<Batch>> {
    (0..count as u64).map(|i| batch_at(seed, i, batch_size, spec)).collect()
}
