//! Minibatch training with AdamW, fold-aware validation and checkpointing.

mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use log::{error, info};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use config::{ModelPreset, TrainConfig};
pub use optim::{AdamW, OptimizerConfig, OptimizerKind};

use crate::autograd::{BufferUpdate, Gradients, Graph, ParamStore};
use crate::data::{augment, encode_mask, normalize_image, ChannelStats, Dataset, EncodeMode, FoldSplit, LabelMapping};
use crate::error::{Error, Result};
use crate::eval::{evaluate, to_batch};
use crate::float::Float;
use crate::loss::{segmentation_loss, LossConfig, LossOutput};
use crate::model::Model;
use crate::task::TaskSpec;

/// Momentum of batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: Option<f64>,
    pub val_dice: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// How `best_epoch` is chosen.
    pub selection: String,
    pub learning_rate: f64,
    pub optimizer: Option<OptimizerConfig>,
    pub train_videos: Vec<String>,
    pub validation_videos: Vec<String>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-epoch generator; sample `i` draws from stream `i + 1`, shuffling from stream 0.
fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Loss, logit gradient and parameter gradients for one batch.
pub fn compute_gradients<T: Float>(
    model: &Model<T>,
    x: Array4<T>,
    target: &Array3<u8>,
    task: &TaskSpec,
    loss_cfg: &LossConfig,
) -> Result<(LossOutput<T>, Gradients<T>, Vec<BufferUpdate<T>>)> {
    let mut g = Graph::new(model.params(), true);
    let out = model.forward_graph(&mut g, x)?;
    let loss = segmentation_loss(g.value(out), target, task, loss_cfg)?;
    let grads = g.backward(out, loss.grad.clone());
    let updates = g.take_buffer_updates();
    Ok((loss, grads, updates))
}

/// Blends batch statistics into running buffers.
pub fn apply_buffer_updates<T: Float>(store: &mut ParamStore<T>, updates: &[BufferUpdate<T>], momentum: f64) {
    let (m, keep) = (T::lit(momentum), T::lit(1.0 - momentum));
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
            for (r, &b) in store.buffer_mut(id).iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
}

pub struct Trainer<'d, T: Float> {
    cfg: TrainConfig,
    task: TaskSpec,
    mapping: LabelMapping,
    dataset: &'d dyn Dataset,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    model: Model<T>,
    opt: AdamW<T>,
    stats: ChannelStats,
    history: TrainHistory,
    next_epoch: usize,
    best_score: Option<f64>,
    write_files: bool,
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Float> {
    pub model: Model<T>,
    pub stats: ChannelStats,
    pub history: TrainHistory,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl<'d, T: Float> Trainer<'d, T> {
    /// Trains on every fold but `cfg.fold_index`, validating on that fold.
    pub fn new(cfg: TrainConfig, dataset: &'d dyn Dataset, split: &FoldSplit) -> Result<Self> {
        let view = split.view(cfg.fold_index)?;
        let train_idx = dataset.indices_for(&view.train);
        let val_idx = dataset.indices_for(&view.validation);
        Self::with_indices(cfg, dataset, train_idx, val_idx)
    }

    /// Trains on `train_idx` and validates on `val_idx`; videos must not overlap.
    pub fn with_indices(cfg: TrainConfig, dataset: &'d dyn Dataset, train_idx: Vec<usize>, val_idx: Vec<usize>) -> Result<Self> {
        cfg.validate()?;
        if train_idx.is_empty() {
            return Err(Error::EmptyTrainingFold);
        }
        let task = cfg.task_spec();
        let mapping = LabelMapping::default_for(cfg.task);
        let model = Model::<T>::new(&cfg.model_config(), cfg.seed)?;
        let mut images = Vec::with_capacity(train_idx.len());
        for &i in &train_idx {
            images.push(dataset.load(i)?.image);
        }
        let stats = ChannelStats::estimate(&images, cfg.normalize_std)?;
        drop(images);
        let opt = AdamW::new(cfg.optimizer, model.params());
        let history = TrainHistory {
            selection: if val_idx.is_empty() { "lowest train loss" } else { "highest validation IoU" }.into(),
            learning_rate: cfg.learning_rate,
            optimizer: Some(cfg.optimizer),
            train_videos: videos_of(dataset, &train_idx),
            validation_videos: videos_of(dataset, &val_idx),
            ..Default::default()
        };
        let trainer = Self {
            cfg,
            task,
            mapping,
            dataset,
            train_idx,
            val_idx,
            model,
            opt,
            stats,
            history,
            next_epoch: 0,
            best_score: None,
            write_files: true,
        };
        trainer.audit()?;
        Ok(trainer)
    }

    /// Continues a run from a checkpoint written by [`Trainer::run`].
    pub fn resume(cfg: TrainConfig, dataset: &'d dyn Dataset, split: &FoldSplit, ck: Checkpoint<T>) -> Result<Self> {
        let t = Self::new(cfg, dataset, split)?;
        t.restore(ck)
    }

    /// [`Trainer::resume`] with explicit sample indices.
    pub fn resume_with_indices(
        cfg: TrainConfig,
        dataset: &'d dyn Dataset,
        train_idx: Vec<usize>,
        val_idx: Vec<usize>,
        ck: Checkpoint<T>,
    ) -> Result<Self> {
        Self::with_indices(cfg, dataset, train_idx, val_idx)?.restore(ck)
    }

    fn restore(mut self, ck: Checkpoint<T>) -> Result<Self> {
        let t = &mut self;
        if ck.task != t.task {
            return Err(Error::TaskMismatch(format!("checkpoint task {} vs config task {}", ck.task.kind, t.task.kind)));
        }
        if ck.model.config() != t.model.config() {
            return Err(Error::Config("checkpoint model config differs from the training config".into()));
        }
        t.model = ck.model;
        t.stats = ck.stats;
        t.opt = ck.optimizer.ok_or_else(|| Error::CorruptArchive("checkpoint has no optimizer state".into()))?;
        t.next_epoch = ck.epoch.map_or(0, |e| e + 1);
        t.best_score = ck.history.best_epoch.and_then(|b| ck.history.records.iter().find(|r| r.epoch == b)).map(|r| {
            r.val_iou.unwrap_or(-r.train_loss)
        });
        t.history = ck.history;
        Ok(self)
    }

    /// Keeps checkpoints and logs in memory only.
    pub fn without_files(mut self) -> Self {
        self.write_files = false;
        self
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    fn audit(&self) -> Result<()> {
        let train: BTreeSet<&str> = self.train_idx.iter().map(|&i| self.dataset.video_id(i)).collect();
        match self.val_idx.iter().map(|&i| self.dataset.video_id(i)).find(|v| train.contains(v)) {
            Some(v) => Err(Error::FoldLeak(v.to_string())),
            None => Ok(()),
        }
    }

    fn prepare(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<(ndarray::Array3<f32>, Array2<u8>)> {
        let s = self.dataset.load(index)?;
        let raw = s.raw_mask.as_ref().ok_or_else(|| Error::MissingMask(PathBuf::from(s.image_id())))?;
        let mask = encode_mask(raw, &self.mapping, EncodeMode::Strict)?.0;
        let image = normalize_image(&s.image, &self.stats);
        let (image, mask, _) = augment(&image, &mask, &self.cfg.augmentation, rng)?;
        Ok((image, mask))
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.next_epoch;
        let start = Instant::now();
        let mut order = self.train_idx.clone();
        order.shuffle(&mut epoch_rng(self.cfg.seed, epoch, 0));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, m) = self.prepare(i, &mut epoch_rng(self.cfg.seed, epoch, i as u64 + 1))?;
                images.push(img);
                masks.push(m);
            }
            let x = to_batch::<T>(&images)?;
            let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
            let target = ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            let (loss, mut grads, updates) = compute_gradients(&self.model, x, &target, &self.task, &self.cfg.loss)?;
            if !loss.total.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| self.dataset.video_id(i)).collect();
                error!("non-finite loss at epoch {epoch}, batch {batch_no} (samples {batch:?} from {ids:?})");
                return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
            }
            if let Some(max) = self.cfg.grad_clip {
                let norm = grads.global_norm().as_f64();
                if norm > max {
                    grads.scale(T::lit(max / norm));
                }
            }
            self.opt.update(self.model.params_mut(), &grads, self.cfg.learning_rate);
            apply_buffer_updates(self.model.params_mut(), &updates, BN_MOMENTUM);
            loss_sum += loss.total * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;

        let last = epoch + 1 == self.cfg.epochs;
        let (val_iou, val_dice) = if !self.val_idx.is_empty() && ((epoch + 1) % self.cfg.validate_every == 0 || last) {
            self.audit()?;
            let r = evaluate(&self.model, self.dataset, &self.val_idx, &self.stats, &self.task, &self.mapping)?;
            (Some(r.mean_iou), Some(r.mean_dice))
        } else {
            (None, None)
        };
        let record = EpochRecord { epoch, train_loss, val_iou, val_dice, wall_seconds: start.elapsed().as_secs_f64() };
        info!(
            "epoch {epoch} loss {train_loss:.6} val_iou {} val_dice {} {:.1}s",
            val_iou.map_or("-".into(), |v| format!("{v:.4}")),
            val_dice.map_or("-".into(), |v| format!("{v:.4}")),
            record.wall_seconds
        );
        self.history.records.push(record.clone());
        self.next_epoch += 1;

        let score = if self.val_idx.is_empty() { Some(-train_loss) } else { val_iou };
        let improved = match (score, self.best_score) {
            (Some(s), Some(b)) => s > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.best_score = score;
            self.history.best_epoch = Some(epoch);
        }
        if self.write_files {
            self.write_epoch_files(&record, improved)?;
        }
        Ok(record)
    }

    fn write_epoch_files(&self, record: &EpochRecord, improved: bool) -> Result<()> {
        let dir = &self.cfg.checkpoint_dir;
        std::fs::create_dir_all(dir)?;
        let ck = self.checkpoint();
        if improved {
            save_checkpoint(&ck, &dir.join("best.ckpt"))?;
        }
        save_checkpoint(&ck, &dir.join("last.ckpt"))?;
        std::fs::write(dir.join("history.json"), self.history.to_json()?)?;
        let mut log = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("train.log"))?;
        writeln!(
            log,
            "epoch={} train_loss={:.6} val_iou={} val_dice={} seconds={:.2}",
            record.epoch,
            record.train_loss,
            record.val_iou.map_or("-".into(), |v| format!("{v:.6}")),
            record.val_dice.map_or("-".into(), |v| format!("{v:.6}")),
            record.wall_seconds
        )?;
        Ok(())
    }

    /// Snapshot of the current state.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            task: self.task,
            stats: self.stats,
            epoch: self.next_epoch.checked_sub(1),
            optimizer: Some(self.opt.clone()),
            history: self.history.clone(),
            train_config: Some(self.cfg.resolved()),
        }
    }

    /// Runs the remaining epochs up to `cfg.epochs`.
    pub fn run(mut self) -> Result<TrainOutcome<T>> {
        while self.next_epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        let dir = &self.cfg.checkpoint_dir;
        let (best, last) = if self.write_files {
            (Some(dir.join("best.ckpt")), Some(dir.join("last.ckpt")))
        } else {
            (None, None)
        };
        Ok(TrainOutcome { model: self.model, stats: self.stats, history: self.history, best_checkpoint: best, last_checkpoint: last })
    }
}

fn videos_of(dataset: &dyn Dataset, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| dataset.video_id(i).to_string()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Trains fold `cfg.fold_index` of `split` to completion.
pub fn train<T: Float>(cfg: TrainConfig, dataset: &dyn Dataset, split: &FoldSplit) -> Result<TrainOutcome<T>> {
    Trainer::new(cfg, dataset, split)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, kfold_split, InMemoryDataset, SynthSpec};
    use crate::model::ModelConfig;
    use crate::task::TaskKind;

    fn tiny_cfg(dir: PathBuf) -> TrainConfig {
        TrainConfig {
            model: Some(ModelConfig::from_widths(1, [4, 4, 4, 4, 4, 4], [4, 4, 4, 4])),
            epochs: 2,
            seed: 3,
            checkpoint_dir: dir,
            augmentation: Vec::new(),
            ..Default::default()
        }
    }

    fn dataset() -> InMemoryDataset {
        let spec = SynthSpec { num_videos: 4, ..SynthSpec::new(8, 32, 32, TaskKind::Binary, 1) };
        InMemoryDataset::new(generate_synthetic(&spec).unwrap())
    }

    #[test]
    fn fold_leak_rejected() {
        let ds = dataset();
        let err = Trainer::<f32>::with_indices(tiny_cfg("unused".into()), &ds, vec![0, 1], vec![1]).err().unwrap();
        assert!(matches!(err, Error::FoldLeak(_)));
        assert!(matches!(
            Trainer::<f32>::with_indices(tiny_cfg("unused".into()), &ds, vec![], vec![1]).err().unwrap(),
            Error::EmptyTrainingFold
        ));
    }

    #[test]
    fn writes_checkpoints_and_resumes_identically() {
        let ds = dataset();
        let split = kfold_split(&ds.video_ids(), 4, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { epochs: 3, ..tiny_cfg(dir.path().join("a")) };
        let full = train::<f32>(cfg.clone(), &ds, &split).unwrap();
        assert!(dir.path().join("a/best.ckpt").is_file());
        assert!(dir.path().join("a/history.json").is_file());
        assert_eq!(full.history.records.len(), 3);
        assert!(full.history.records.iter().all(|r| r.val_iou.is_some()));

        let short = TrainConfig { epochs: 2, checkpoint_dir: dir.path().join("b"), ..cfg.clone() };
        train::<f32>(short, &ds, &split).unwrap();
        let ck = load_checkpoint::<f32>(&dir.path().join("b/last.ckpt")).unwrap();
        assert_eq!(ck.epoch, Some(1));
        let resumed = Trainer::resume(TrainConfig { checkpoint_dir: dir.path().join("b"), ..cfg }, &ds, &split, ck).unwrap();
        let out = resumed.run().unwrap();
        let (a, b) = (full.history.records[2].train_loss, out.history.records[2].train_loss);
        assert!((a - b).abs() <= 1e-5 * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn batch_norm_buffers_move() {
        let ds = dataset();
        let mut model_cfg = ModelConfig::from_widths(1, [4, 4, 4, 4, 4, 4], [4, 4, 4, 4]);
        model_cfg.normalization = crate::model::Normalization::Batch;
        let cfg = TrainConfig { model: Some(model_cfg), epochs: 1, ..tiny_cfg("unused".into()) };
        let t = Trainer::<f32>::with_indices(cfg, &ds, vec![0, 1], vec![]).unwrap().without_files();
        let before: Vec<_> = t.model().params().buffers().iter().map(|b| b.value.clone()).collect();
        let out = t.run().unwrap();
        let after: Vec<_> = out.model.params().buffers().iter().map(|b| b.value.clone()).collect();
        assert!(!before.is_empty());
        assert_ne!(before, after);
        assert_eq!(out.history.selection, "lowest train loss");
    }
}
