use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{argmax_rows, predict, stack_images, LabeledImages};
use super::loss::{focal_loss, focal_loss_grad, one_hot, smooth_labels, FocalLossConfig};
use super::schedule::{cosine_lr, early_stop_check, schedule_steps};
use crate::augment::{apply_augmentation, mixup_batch, AugmentConfig, MixUpConfig};
use crate::dataset::ClassWeights;
use crate::error::{Error, Result};
use crate::model::{BackwardRequest, CheckpointMeta, Classifier, FreezeStage};
use crate::nn::adam::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage_id: u8,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    #[serde(default = "default_floor")]
    pub floor_fraction: f64,
}

fn default_floor() -> f64 {
    0.01
}

impl StageConfig {
    pub fn new(stage_id: u8, epochs: usize, base_lr: f64, weight_decay: f64) -> Self {
        StageConfig {
            stage_id,
            epochs,
            base_lr,
            weight_decay,
            early_stop_patience: None,
            floor_fraction: default_floor(),
        }
    }

    /// Frozen backbone, partial unfreeze with early stopping, full fine-tune.
    pub fn defaults() -> [StageConfig; 3] {
        let mut stage2 = StageConfig::new(2, 20, 1e-4, 1e-4);
        stage2.early_stop_patience = Some(10);
        [StageConfig::new(1, 25, 1e-3, 1e-4), stage2, StageConfig::new(3, 15, 1e-5, 1e-5)]
    }

    pub fn validate(&self) -> Result<()> {
        FreezeStage::try_from(self.stage_id)?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", format!("stage {} needs at least one epoch", self.stage_id)));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::invalid("early_stop_patience", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.floor_fraction) {
            return Err(Error::invalid("floor_fraction", "must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch_index: usize) -> Result<f64> {
        cosine_lr(epoch_index, schedule_steps(self.epochs), self.base_lr, self.floor_fraction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub mixup: MixUpConfig,
    pub loss: FocalLossConfig,
    pub class_weights: Option<ClassWeights>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 32,
            eval_batch_size: 64,
            seed: 42,
            augment: AugmentConfig::default(),
            mixup: MixUpConfig::default(),
            loss: FocalLossConfig::default(),
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    /// 1-based within the stage.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHistory {
    pub stage_id: u8,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub stage: u8,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub stages: Vec<StageHistory>,
    pub best: Option<BestCheckpoint>,
    pub wall_clock_secs: f64,
}

/// Where a run writes its epoch log and checkpoints. `RunSink::none()`
/// keeps everything in memory.
pub struct RunSink {
    dir: Option<PathBuf>,
    save_epoch_checkpoints: bool,
    log: Option<BufWriter<File>>,
}

impl RunSink {
    pub fn none() -> Self {
        RunSink {
            dir: None,
            save_epoch_checkpoints: false,
            log: None,
        }
    }

    /// Log goes to `dir/train_log.jsonl`, checkpoints under `dir/checkpoints`.
    pub fn to_dir(dir: &Path, save_epoch_checkpoints: bool) -> Result<Self> {
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let log_path = dir.join("train_log.jsonl");
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(RunSink {
            dir: Some(dir.to_path_buf()),
            save_epoch_checkpoints,
            log: Some(BufWriter::new(file)),
        })
    }

    pub fn checkpoint_dir(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoints").join(name))
    }

    fn log_epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        let Some(log) = self.log.as_mut() else { return Ok(()) };
        let mut value = serde_json::to_value(rec)?;
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        value["timestamp"] = serde_json::json!(ts);
        let io = |e| Error::Io {
            path: PathBuf::from("train_log.jsonl"),
            source: e,
        };
        writeln!(log, "{value}").map_err(io)?;
        log.flush().map_err(io)
    }

    fn save(&self, model: &Classifier, name: &str, meta: &CheckpointMeta) -> Result<Option<PathBuf>> {
        match self.checkpoint_dir(name) {
            Some(path) => {
                model.save(&path, meta)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}

fn stage_seed(seed: u64, stage: u8) -> u64 {
    seed ^ (stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Validation loss (smoothed targets, same focal settings) and accuracy.
pub fn evaluate(model: &Classifier, data: &LabeledImages, opts: &TrainOptions) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("val", "validation set is empty"));
    }
    let probs = predict(model, &data.images, opts.eval_batch_size)?;
    let labels = data.label_indices();
    let targets = smooth_labels(&one_hot(&labels)?, opts.loss.smoothing)?;
    let loss = focal_loss(&probs, &targets, &opts.loss, opts.class_weights.as_ref())?;
    let correct = argmax_rows(&probs).iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok((loss, correct as f64 / labels.len() as f64))
}

/// Runs one stage and restores the parameters of its best validation epoch.
/// The freeze stage must already be applied to `model`.
pub fn run_stage(
    model: &mut Classifier,
    train: &LabeledImages,
    val: &LabeledImages,
    cfg: &StageConfig,
    opts: &TrainOptions,
    sink: &mut RunSink,
) -> Result<StageHistory> {
    cfg.validate()?;
    opts.loss.validate()?;
    opts.augment.validate()?;
    let expected = FreezeStage::try_from(cfg.stage_id)?;
    if model.stage() != Some(expected) {
        return Err(Error::invalid(
            "model",
            format!("freeze stage {:?} does not match stage {}", model.stage(), cfg.stage_id),
        ));
    }
    if train.len() < 2 {
        return Err(Error::invalid("train", "need at least two training images"));
    }
    if opts.batch_size < 2 {
        return Err(Error::invalid("batch_size", "must be >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(opts.seed, cfg.stage_id));
    let mut adam = Adam::new(cfg.weight_decay);
    let labels = train.label_indices();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = StageHistory {
        stage_id: cfg.stage_id,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best_model: Option<Classifier> = None;

    for e in 0..cfg.epochs {
        let lr = cfg.lr_at(e)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(opts.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let augmented = batch
                .iter()
                .map(|&i| apply_augmentation(&train.images[i], &opts.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mut x = stack_images(&augmented)?;
            let hard: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut targets = smooth_labels(&one_hot(&hard)?, opts.loss.smoothing)?;
            if opts.mixup.enabled && rng.random_bool(opts.mixup.probability) {
                let mixed = mixup_batch(&x, &targets, &opts.mixup, &mut rng)?;
                x = mixed.images;
                targets = mixed.soft_labels;
            }
            let trace = model.forward_train(&x, &mut rng)?;
            let loss = focal_loss(&trace.probs, &targets, &opts.loss, opts.class_weights.as_ref())?;
            if !loss.is_finite() {
                let name = format!("diverged_stage{}_epoch{}", cfg.stage_id, e + 1);
                let saved = sink.save(model, &name, &CheckpointMeta::default())?;
                return Err(Error::Diverged {
                    stage: cfg.stage_id,
                    epoch: e + 1,
                    reason: format!(
                        "non-finite training loss{}",
                        saved.map(|p| format!("; diagnostic checkpoint at {}", p.display())).unwrap_or_default()
                    ),
                });
            }
            let dlogits = focal_loss_grad(&trace.probs, &targets, &opts.loss, opts.class_weights.as_ref())?;
            let grads = model.backward(&trace, &dlogits, &BackwardRequest::training())?;
            adam.step(model.params_mut(), &grads.params, lr);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            correct += argmax_rows(&trace.probs).iter().zip(&hard).filter(|(p, l)| p == l).count();
        }
        let (val_loss, val_accuracy) = evaluate(model, val, opts)?;
        let rec = EpochRecord {
            stage: cfg.stage_id,
            epoch: e + 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "stage {} epoch {}/{}: lr {:.3e} loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            rec.stage,
            rec.epoch,
            cfg.epochs,
            lr,
            rec.train_loss,
            rec.train_accuracy,
            val_loss,
            val_accuracy
        );
        sink.log_epoch(&rec)?;
        history.epochs.push(rec);
        if val_accuracy > history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = e + 1;
            best_model = Some(model.clone());
        }
        if sink.save_epoch_checkpoints {
            let meta = CheckpointMeta {
                stage: Some(cfg.stage_id),
                epoch: Some(e + 1),
                history: serde_json::to_value(&history)?,
                ..CheckpointMeta::default()
            };
            sink.save(model, &format!("stage{}_epoch{}", cfg.stage_id, e + 1), &meta)?;
        }
        if let Some(p) = cfg.early_stop_patience {
            let accs: Vec<f64> = history.epochs.iter().map(|r| r.val_accuracy).collect();
            if early_stop_check(&accs, p) {
                log::info!("stage {}: early stop after epoch {}", cfg.stage_id, e + 1);
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some(best) = best_model {
        *model = best;
    }
    Ok(history)
}

/// Chains freeze stages and [`run_stage`]; `model` ends holding the best
/// parameters seen across all stages.
pub fn run_schedule(
    model: &mut Classifier,
    train: &LabeledImages,
    val: &LabeledImages,
    stages: &[StageConfig],
    opts: &TrainOptions,
    sink: &mut RunSink,
) -> Result<TrainingReport> {
    if stages.is_empty() {
        return Err(Error::invalid("stages", "no stages configured"));
    }
    if stages.windows(2).any(|w| w[1].stage_id <= w[0].stage_id) {
        return Err(Error::invalid("stages", "stage ids must be increasing (1, 2, 3)"));
    }
    let start = Instant::now();
    let mut report = TrainingReport {
        stages: Vec::new(),
        best: None,
        wall_clock_secs: 0.0,
    };
    let mut best_model: Option<Classifier> = None;
    for cfg in stages {
        cfg.validate()?;
        model.set_freeze_stage(FreezeStage::try_from(cfg.stage_id)?);
        let counts = model.parameter_counts();
        log::info!(
            "stage {}: {} epochs, lr {:.1e}, weight decay {:.1e}, trainable {}/{} ({:.1}%)",
            cfg.stage_id,
            cfg.epochs,
            cfg.base_lr,
            cfg.weight_decay,
            counts.trainable,
            counts.total,
            100.0 * counts.trainable_fraction()
        );
        let history = run_stage(model, train, val, cfg, opts, sink)?;
        let improved = report.best.as_ref().is_none_or(|b| history.best_val_accuracy > b.val_accuracy);
        let stage_best = (history.stage_id, history.best_epoch, history.best_val_accuracy);
        report.stages.push(history);
        if improved {
            let meta = CheckpointMeta {
                stage: Some(stage_best.0),
                epoch: Some(stage_best.1),
                history: serde_json::to_value(&report.stages)?,
                ..CheckpointMeta::default()
            };
            let path = sink.save(model, "best", &meta)?;
            report.best = Some(BestCheckpoint {
                stage: stage_best.0,
                epoch: stage_best.1,
                val_accuracy: stage_best.2,
                path,
            });
            best_model = Some(model.clone());
        } else if let Some(best) = &best_model {
            // Next stage continues from the best weights so far.
            let stage = model.stage();
            *model = best.clone();
            if let Some(s) = stage {
                model.set_freeze_stage(s);
            }
        }
    }
    if let Some(best) = best_model {
        *model = best;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LesionClass, NormalizedImage};
    use crate::model::{AttentionConfig, BackboneSpec, HeadConfig, ModelSpec};
    use ndarray::Array3;

    fn colour_set(per_class: usize, seed: u64) -> LabeledImages {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = LabeledImages::default();
        for class in [LesionClass::Akiec, LesionClass::Mel, LesionClass::Nv] {
            let c = class.index() % 3;
            for i in 0..per_class {
                let px = Array3::from_shape_fn((8, 8, 3), |(_, _, ch)| {
                    let base = if ch == c { 0.8 } else { 0.2 };
                    base + rng.random_range(-0.1..0.1)
                });
                data.push(format!("{}_{i}", class.code()), NormalizedImage::raw01(px).unwrap(), class);
            }
        }
        data
    }

    fn tiny() -> Classifier {
        let spec = ModelSpec {
            backbone: BackboneSpec {
                channels: vec![4, 8],
                strides: vec![2, 2],
                ..BackboneSpec::toy()
            },
            attention: AttentionConfig {
                reduction_ratio: 2,
                channels: None,
            },
            head: HeadConfig {
                dropout: 0.1,
                hidden_sizes: vec![16],
                num_classes: 7,
            },
        };
        Classifier::build(&spec, 3).unwrap()
    }

    fn opts() -> TrainOptions {
        TrainOptions {
            batch_size: 8,
            augment: AugmentConfig::disabled(),
            mixup: MixUpConfig {
                enabled: false,
                ..MixUpConfig::default()
            },
            ..TrainOptions::default()
        }
    }

    fn stages() -> Vec<StageConfig> {
        vec![
            StageConfig::new(1, 3, 1e-2, 1e-4),
            StageConfig::new(2, 2, 3e-3, 1e-4),
            StageConfig::new(3, 2, 1e-3, 1e-5),
        ]
    }

    #[test]
    fn schedule_learns_colours_and_writes_artifacts() {
        let (train, val) = (colour_set(12, 1), colour_set(4, 2));
        let dir = tempfile::tempdir().unwrap();
        let mut sink = RunSink::to_dir(dir.path(), true).unwrap();
        let mut model = tiny();
        let report = run_schedule(&mut model, &train, &val, &stages(), &opts(), &mut sink).unwrap();
        assert_eq!(report.stages.len(), 3);
        let best = report.best.clone().unwrap();
        assert!(best.val_accuracy >= 0.9, "{report:?}");
        let (_, acc) = evaluate(&model, &val, &opts()).unwrap();
        assert_eq!(acc, best.val_accuracy);

        let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 7);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first["stage"], 1);
        assert!(first["timestamp"].as_f64().unwrap() > 0.0);
        assert!(dir.path().join("checkpoints/stage3_epoch2").join(crate::model::PARAMS_FILE).exists());
        let (loaded, meta) = Classifier::load(&dir.path().join("checkpoints/best")).unwrap();
        assert_eq!(meta.stage, Some(best.stage));
        assert_eq!(loaded.forward(&stack_images(&val.images).unwrap()).unwrap().0, model.forward(&stack_images(&val.images).unwrap()).unwrap().0);
    }

    #[test]
    fn runs_are_deterministic() {
        let (train, val) = (colour_set(6, 1), colour_set(2, 2));
        let run = || {
            let mut model = tiny();
            let mut r = run_schedule(&mut model, &train, &val, &stages()[..2], &opts(), &mut RunSink::none()).unwrap();
            r.wall_clock_secs = 0.0;
            (r, model.forward(&stack_images(&val.images).unwrap()).unwrap().0)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_stage_only_moves_the_head() {
        let (train, val) = (colour_set(4, 1), colour_set(2, 2));
        let mut model = tiny();
        model.set_freeze_stage(FreezeStage::FrozenBackbone);
        let before = model.clone();
        run_stage(&mut model, &train, &val, &stages()[0], &opts(), &mut RunSink::none()).unwrap();
        let moved: Vec<(String, bool)> = before
            .params()
            .iter()
            .zip(model.params())
            .map(|(a, b)| (a.name.clone(), a.value != b.value))
            .collect();
        for (name, changed) in moved {
            assert_eq!(changed, before.is_trainable(&name), "{name}");
        }
    }

    #[test]
    fn stage_preconditions() {
        let (train, val) = (colour_set(4, 1), colour_set(2, 2));
        let mut model = tiny();
        model.set_freeze_stage(FreezeStage::Full);
        let err = run_stage(&mut model, &train, &val, &stages()[0], &opts(), &mut RunSink::none());
        assert!(err.is_err());
        let backwards = [stages()[1], stages()[0]];
        assert!(run_schedule(&mut model, &train, &val, &backwards, &opts(), &mut RunSink::none()).is_err());
        assert!(run_schedule(&mut model, &train, &val, &[], &opts(), &mut RunSink::none()).is_err());
        let empty = LabeledImages::default();
        assert!(evaluate(&model, &empty, &opts()).is_err());
    }

    #[test]
    fn early_stop_cuts_a_flat_stage() {
        let (train, val) = (colour_set(4, 1), colour_set(2, 2));
        let mut model = tiny();
        model.set_freeze_stage(FreezeStage::FrozenBackbone);
        let mut cfg = StageConfig::new(1, 10, 1e-12, 0.0);
        cfg.early_stop_patience = Some(2);
        let h = run_stage(&mut model, &train, &val, &cfg, &opts(), &mut RunSink::none()).unwrap();
        // A negligible learning rate keeps validation accuracy flat, so the first epoch stays best.
        assert!(h.stopped_early);
        assert_eq!(h.epochs.len(), 4);
        assert_eq!(h.best_epoch, 1);
    }

    #[test]
    fn stage_defaults() {
        let d = StageConfig::defaults();
        assert_eq!(d.map(|s| s.epochs), [25, 20, 15]);
        assert_eq!(d.map(|s| s.base_lr), [1e-3, 1e-4, 1e-5]);
        assert_eq!(d[1].early_stop_patience, Some(10));
        assert!((d[0].lr_at(24).unwrap() - 1e-5).abs() < 1e-15);
        assert_eq!(stage_seed(42, 0), 42);
        assert_ne!(stage_seed(42, 1), stage_seed(42, 2));
    }
}
