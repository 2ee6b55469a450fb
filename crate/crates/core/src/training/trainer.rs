//! The epoch loop with best-on-validation retention.

use std::collections::BTreeMap;
use std::path::Path;

use moct_autodiff::{Adam, AdamConfig, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, CheckpointMeta, Model, Phase};
use crate::synthdata::{DatasetManifest, SliceSample};
use crate::training::data::{build_samples, validation_samples, TaskMapping};
use crate::training::folds::FoldSplit;
use crate::training::loss::{combined_loss, DICE_EPS};
use crate::training::weights::dataset_weights;

/// Loss weighting per dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    /// `"auto"`: inverse dataset size, mean 1.
    Auto(String),
    Fixed(BTreeMap<String, f64>),
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Auto("auto".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Set from the run seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
    /// Soft Dice smoothing.
    pub loss_eps: f64,
    pub weights: WeightSpec,
    /// Stop after this many optimizer steps in total (smoke runs).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            loss_eps: DICE_EPS,
            weights: WeightSpec::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.loss_eps > 0.0) {
            return Err(Error::Config(format!("loss_eps must be positive, got {}", self.loss_eps)));
        }
        if let WeightSpec::Auto(s) = &self.weights {
            if s != "auto" {
                return Err(Error::Config(format!("weights must be \"auto\" or a table, got \"{s}\"")));
            }
        }
        Ok(())
    }

    /// Loss weight per dataset for the datasets in `mapping`.
    pub fn resolve_weights(&self, manifest: &DatasetManifest, datasets: &[String]) -> Result<BTreeMap<String, f64>> {
        match &self.weights {
            WeightSpec::Auto(_) => {
                let sizes = datasets
                    .iter()
                    .map(|d| Ok((d.clone(), manifest.dataset(d)?.subjects.len())))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                dataset_weights(&sizes)
            }
            WeightSpec::Fixed(map) => datasets
                .iter()
                .map(|d| {
                    map.get(d)
                        .map(|&w| (d.clone(), w))
                        .ok_or_else(|| Error::Config(format!("no loss weight given for dataset {d}")))
                })
                .collect(),
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    /// Validation Dice per trained task.
    pub val_dice: BTreeMap<usize, f64>,
    /// Mean of `val_dice`, the selection score.
    pub mean_val_dice: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Model<f32>,
    adam: Adam<f32>,
    loss_eps: f32,
}

fn stack(batch: &[&SliceSample]) -> (Vec<f32>, Vec<usize>, Vec<usize>) {
    let mut x = Vec::with_capacity(batch.iter().map(|s| s.slab.len()).sum());
    let mut labels = Vec::new();
    let mut tasks = Vec::with_capacity(batch.len());
    for s in batch {
        x.extend_from_slice(&s.slab);
        labels.extend(s.target.iter().map(|&v| v as usize));
        tasks.push(s.task_id);
    }
    (x, labels, tasks)
}

impl Trainer {
    pub fn new(model: Model<f32>, lr: f64, loss_eps: f64) -> Self {
        Self { model, adam: Adam::new(AdamConfig { lr, ..AdamConfig::default() }), loss_eps: loss_eps as f32 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Forward, backward and one Adam update. Returns the batch loss.
    pub fn step(&mut self, batch: &[&SliceSample], weights: &[f32], epoch: usize) -> Result<f32> {
        let cfg = self.model.config.clone();
        let (x, labels, tasks) = stack(batch);
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let xv = tape.constant(&[batch.len(), cfg.in_channels, cfg.image_hw, cfg.image_hw], x)?;
        let out = self.model.forward(&mut tape, &bound, xv, &tasks, Phase::Train)?;
        let loss = combined_loss(&mut tape, out.logits, &labels, weights, self.loss_eps)?;
        let value = tape.value(loss)[0];
        let step = self.adam.steps_taken() as usize + 1;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step });
        }
        let grads = tape.backward(loss)?;
        self.model.params.absorb_grads(&grads);
        self.adam.step(self.model.params.iter_mut()).map_err(|e| match e {
            moct_autodiff::AutodiffError::NonFiniteGradient(_) => Error::NonFiniteLoss { epoch, step },
            other => other.into(),
        })?;
        self.model.update_norms(&out.batch_stats);
        Ok(value)
    }
}

/// Per-pixel argmax class maps for a list of slabs, evaluated in batches.
pub fn predict_classes(model: &Model<f32>, slabs: &[&[f32]], tasks: &[usize], batch: usize) -> Result<Vec<Vec<u8>>> {
    let cfg = &model.config;
    let px = cfg.image_hw * cfg.image_hw;
    let mut out = Vec::with_capacity(slabs.len());
    for (chunk, task_chunk) in slabs.chunks(batch.max(1)).zip(tasks.chunks(batch.max(1))) {
        let x: Vec<f32> = chunk.iter().flat_map(|s| s.iter().copied()).collect();
        let (shape, logits) = model.predict_logits(&x, chunk.len(), task_chunk)?;
        let classes = shape[1];
        for b in 0..chunk.len() {
            let base = b * classes * px;
            out.push(
                (0..px)
                    .map(|i| {
                        let mut best = 0;
                        for c in 1..classes {
                            if logits[base + c * px + i] > logits[base + best * px + i] {
                                best = c;
                            }
                        }
                        best as u8
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn slice_dice(pred: &[u8], class: u8, target: &[u8]) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &t) in pred.iter().zip(target) {
        let (pa, ta) = (a == class, t == 1);
        inter += usize::from(pa && ta);
        p += usize::from(pa);
        g += usize::from(ta);
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Mean per-slice Dice for each task over binary validation samples.
pub fn validation_dice(model: &Model<f32>, samples: &[SliceSample], mapping: &TaskMapping, batch: usize) -> Result<BTreeMap<usize, f64>> {
    let slabs: Vec<&[f32]> = samples.iter().map(|s| s.slab.as_slice()).collect();
    let tasks: Vec<usize> = samples.iter().map(|s| s.task_id).collect();
    let preds = predict_classes(model, &slabs, &tasks, batch)?;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (s, pred) in samples.iter().zip(&preds) {
        let Some(class) = mapping.class_of(s.task_id) else { continue };
        let e = sums.entry(s.task_id).or_default();
        e.0 += slice_dice(pred, class as u8, &s.target);
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect())
}

/// What to train: the variant, and for `base_single` the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSpec {
    pub variant: Variant,
    pub dataset: Option<String>,
    pub fold: Option<usize>,
}

/// Trains one model on the training subjects of `split`, selecting the
/// epoch with the best mean validation Dice.
pub fn train_run(
    manifest: &DatasetManifest,
    split: &FoldSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    run: &RunSpec,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let mapping = TaskMapping::new(manifest, run.variant, run.dataset.as_deref())?;
    let cfg = ModelConfig {
        architecture: run.variant.architecture(),
        n_classes: mapping.n_classes,
        n_tasks: manifest.n_tasks(),
        ..model_cfg.clone()
    };
    cfg.validate()?;
    let hw = cfg.image_hw;
    let samples = build_samples(manifest, run.variant, &mapping, &split.train, hw)?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples in the selected split".into()));
    }
    let val = validation_samples(manifest, &mapping, &split.validation, hw)?;
    let weights = train_cfg.resolve_weights(manifest, &mapping.datasets)?;
    let sample_weight: Vec<f32> = samples.iter().map(|s| weights[&s.dataset] as f32).collect();

    let mut trainer = Trainer::new(Model::new(cfg.clone(), train_cfg.seed)?, train_cfg.lr, train_cfg.loss_eps);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(1);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut steps = 0usize;
    let eval_batch = train_cfg.batch_size.max(8);
    'epochs: for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(train_cfg.batch_size) {
            if train_cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let w: Vec<f32> = chunk.iter().map(|&i| sample_weight[i]).collect();
            losses.push(trainer.step(&batch, &w, epoch)? as f64);
            steps += 1;
        }
        if losses.is_empty() {
            break 'epochs;
        }
        let val_dice = validation_dice(&trainer.model, &val, &mapping, eval_batch)?;
        let mean_val_dice =
            if val_dice.is_empty() { f64::NAN } else { val_dice.values().sum::<f64>() / val_dice.len() as f64 };
        let mean_train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let score = if mean_val_dice.is_nan() { f64::NEG_INFINITY } else { mean_val_dice };
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, trainer.model.clone()));
        }
        history.push(EpochRecord { epoch, mean_train_loss, val_dice, mean_val_dice });
    }
    let (_, best_epoch, model) = best.ok_or_else(|| Error::Config("no training step was run".into()))?;
    let meta = CheckpointMeta {
        config: cfg,
        variant: run.variant,
        fold: run.fold,
        datasets: mapping.datasets.clone(),
        task_classes: mapping.task_classes.clone(),
        seed: train_cfg.seed,
        epoch: best_epoch,
    };
    Ok(TrainOutcome { checkpoint: Checkpoint { meta, model }, history, best_epoch, steps })
}

/// `epoch,mean_train_loss,val_dice_task_1..K`; tasks the model does not
/// predict are written as `NA`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord], n_tasks: usize) -> Result<()> {
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["epoch".to_string(), "mean_train_loss".to_string()];
    header.extend((1..=n_tasks).map(|k| format!("val_dice_task_{k}")));
    w.write_record(&header).map_err(io)?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), format!("{:.6}", r.mean_train_loss)];
        row.extend((1..=n_tasks).map(|k| r.val_dice.get(&k).map_or("NA".into(), |d| format!("{d:.6}"))));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
