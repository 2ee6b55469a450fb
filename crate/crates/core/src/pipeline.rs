//! Run configuration and the end-to-end steps driven by the command line:
//! training a variant on a fold, evaluating checkpoints and exporting masks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, evaluate_checkpoint, method_name, write_pairwise_csv, write_report_csv, MethodResults, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::synthdata::samples::build_slab;
use crate::synthdata::{normalize, read_volume, resize2d, DatasetManifest, ResizeMode, Scale};
use crate::training::{kfold_split, predict_classes, train_run, write_history_csv, FoldPlan, RunSpec, TrainConfig, TrainOutcome, DEFAULT_FOLDS};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `manifest.json`.
    pub root: PathBuf,
    /// Every output is written below this directory.
    pub output: PathBuf,
    pub folds: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { root: "data".into(), output: "runs".into(), folds: DEFAULT_FOLDS }
    }
}

/// Optional overrides of the scale's default model shape.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub c_base: Option<usize>,
    pub m: Option<usize>,
    pub levels: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_expansion: Option<usize>,
    pub image_hw: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    seed: u64,
    #[serde(default = "default_scale")]
    scale: String,
    variant: Option<String>,
    dataset: Option<String>,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainConfig,
}

fn default_scale() -> String {
    "desk".into()
}

/// Parsed run configuration. Relative paths are resolved against the
/// directory of the configuration file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: Scale,
    pub variant: Option<Variant>,
    /// Dataset for `base_single`.
    pub dataset: Option<String>,
    pub data: DataSection,
    pub model: ModelSection,
    /// `train.seed` always equals `seed`.
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        let scale: Scale = raw.scale.parse()?;
        let variant = raw.variant.as_deref().map(str::parse).transpose()?;
        let mut data = raw.data;
        data.root = base_dir.join(&data.root);
        data.output = base_dir.join(&data.output);
        let train = TrainConfig { seed: raw.seed, ..raw.train };
        let cfg = Self { seed: raw.seed, scale, variant, dataset: raw.dataset, data, model: raw.model, train };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.folds < 2 {
            return Err(Error::Config(format!("data.folds must be at least 2, got {}", self.data.folds)));
        }
        self.model_config().validate()
    }

    /// Model shape for this scale with overrides applied. Class and task
    /// counts are fixed later from the manifest and variant.
    pub fn model_config(&self) -> ModelConfig {
        let base = match self.scale {
            Scale::Desk => ModelConfig::desk(),
            Scale::Full => ModelConfig::full(),
        };
        let o = &self.model;
        ModelConfig {
            c_base: o.c_base.unwrap_or(base.c_base),
            m: o.m.unwrap_or(base.m),
            levels: o.levels.unwrap_or(base.levels),
            heads: o.heads.unwrap_or(base.heads),
            ffn_expansion: o.ffn_expansion.unwrap_or(base.ffn_expansion),
            image_hw: o.image_hw.unwrap_or(base.image_hw),
            ..base
        }
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(&self.data.root)
    }
}

pub fn fold_plan(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    let subjects = manifest
        .datasets
        .iter()
        .map(|d| (d.name.clone(), d.subjects.iter().map(|s| s.id.clone()).collect()))
        .collect();
    kfold_split(&subjects, k, seed)
}

/// Output directory of one variant: `base_single` runs are kept apart per
/// dataset.
pub fn run_dir(output: &Path, variant: Variant, dataset: Option<&str>, fold: usize) -> PathBuf {
    let name = match (variant, dataset) {
        (Variant::BaseSingle, Some(d)) => format!("base_single-{d}"),
        _ => variant.to_string(),
    };
    output.join(name).join(format!("fold{fold}"))
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains `variant` on fold `fold` and writes `best.ckpt` and `history.csv`.
pub fn train_variant(cfg: &RunConfig, variant: Variant, dataset: Option<&str>, fold: usize) -> Result<TrainArtifacts> {
    if fold >= cfg.data.folds {
        return Err(Error::Config(format!("fold {fold} out of range 0..{}", cfg.data.folds)));
    }
    if variant == Variant::BaseSingle && dataset.is_none() {
        return Err(Error::Config("base_single needs a dataset".into()));
    }
    let dataset = dataset.filter(|_| variant == Variant::BaseSingle);
    let manifest = cfg.manifest()?;
    if let Some(d) = dataset {
        manifest.dataset(d).map_err(|e| Error::Config(e.to_string()))?;
    }
    let split = fold_plan(&manifest, cfg.data.folds, cfg.seed)?.split(fold)?;
    let run = RunSpec { variant, dataset: dataset.map(String::from), fold: Some(fold) };
    let outcome = train_run(&manifest, &split, &cfg.model_config(), &cfg.train, &run)?;
    let dir = run_dir(&cfg.data.output, variant, dataset, fold);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let checkpoint = dir.join("best.ckpt");
    save_checkpoint(&checkpoint, &outcome.checkpoint)?;
    let history = dir.join("history.csv");
    write_history_csv(&history, &outcome.history, manifest.n_tasks())?;
    Ok(TrainArtifacts { checkpoint, history, outcome })
}

/// Test subjects of a checkpoint's fold, or every subject for checkpoints
/// trained without cross-validation.
fn test_subjects(cfg: &RunConfig, manifest: &DatasetManifest, ckpt: &Checkpoint) -> Result<BTreeMap<String, Vec<String>>> {
    match ckpt.meta.fold {
        Some(f) => Ok(fold_plan(manifest, cfg.data.folds, cfg.seed)?.split(f)?.test),
        None => Ok(manifest
            .datasets
            .iter()
            .map(|d| (d.name.clone(), d.subjects.iter().map(|s| s.id.clone()).collect()))
            .collect()),
    }
}

pub struct EvalArtifacts {
    pub report: PathBuf,
    pub pairwise: Option<PathBuf>,
    pub metrics: MetricsReport,
}

/// Evaluates checkpoints on their test subjects and writes `report.csv`,
/// plus `pairwise.csv` when more than one checkpoint is given. Paired tests
/// use `mo_ctrans` as the reference when present.
pub fn evaluate(cfg: &RunConfig, checkpoints: &[PathBuf], out_dir: &Path) -> Result<EvalArtifacts> {
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints given".into()));
    }
    let manifest = cfg.manifest()?;
    let mut methods: Vec<MethodResults> = Vec::new();
    for path in checkpoints {
        let ckpt = load_checkpoint(path)?;
        if ckpt.meta.config.n_tasks != manifest.n_tasks() {
            return Err(Error::Checkpoint {
                path: path.clone(),
                detail: format!("trained for {} tasks, manifest defines {}", ckpt.meta.config.n_tasks, manifest.n_tasks()),
            });
        }
        let name = method_name(&ckpt.meta);
        if methods.iter().any(|m| m.method == name) {
            return Err(Error::Config(format!("two checkpoints are both `{name}`")));
        }
        let subjects = test_subjects(cfg, &manifest, &ckpt)?;
        let batch = cfg.train.batch_size.max(8);
        methods.push(MethodResults { method: name, subjects: evaluate_checkpoint(&ckpt, &manifest, &subjects, batch)? });
    }
    let reference = methods.iter().find(|m| m.method == Variant::MoCtrans.as_str()).map(|m| m.method.clone());
    let metrics = aggregate_report(&methods, reference.as_deref())?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report = out_dir.join("report.csv");
    write_report_csv(&report, &metrics)?;
    let pairwise = if methods.len() > 1 {
        let p = out_dir.join("pairwise.csv");
        write_pairwise_csv(&p, &metrics)?;
        Some(p)
    } else {
        None
    };
    Ok(EvalArtifacts { report, pairwise, metrics })
}

/// Binary 8-bit PGM, foreground 255.
pub fn encode_pgm(width: usize, height: usize, mask: &[bool]) -> Vec<u8> {
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

/// Predicts every slice of `image` for `task` and writes
/// `slice_###.pgm` at the volume's resolution plus `index.txt`
/// (`slice file foreground_pixels`). Returns the written PGM paths.
pub fn predict_volume(ckpt: &Checkpoint, image: &Path, task: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let class = ckpt.meta.class_of(task).ok_or_else(|| {
        let known: Vec<String> = ckpt.meta.task_classes.iter().map(|(t, _)| t.to_string()).collect();
        Error::Config(format!("task {task} is not predicted by this checkpoint (tasks: {})", known.join(", ")))
    })?;
    let volume = read_volume(image)?;
    let [depth, h, w] = volume.dims;
    let norm = normalize(&volume);
    let hw = ckpt.model.config.image_hw;
    let slabs: Vec<Vec<f32>> = (0..depth).map(|z| build_slab(&norm, volume.dims, z, hw)).collect();
    let refs: Vec<&[f32]> = slabs.iter().map(Vec::as_slice).collect();
    let preds = predict_classes(&ckpt.model, &refs, &vec![task; depth], 8)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut index = String::new();
    let mut written = Vec::with_capacity(depth);
    for (z, pred) in preds.iter().enumerate() {
        let back = resize2d(pred, (hw, hw), (h, w), ResizeMode::Nearest);
        let mask: Vec<bool> = back.iter().map(|&c| c as usize == class).collect();
        let name = format!("slice_{z:03}.pgm");
        let path = out_dir.join(&name);
        std::fs::write(&path, encode_pgm(w, h, &mask)).map_err(|e| Error::io(&path, e))?;
        index.push_str(&format!("{z} {name} {}\n", mask.iter().filter(|&&m| m).count()));
        written.push(path);
    }
    let index_path = out_dir.join("index.txt");
    std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    Ok(written)
}
