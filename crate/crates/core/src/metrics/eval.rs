//! Subject-level evaluation of a checkpoint and aggregation into reports.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::metrics::overlap::{assd, dice_coefficient, Assd, BinaryMask};
use crate::metrics::wilcoxon::wilcoxon_signed_rank;
use crate::model::{Checkpoint, CheckpointMeta};
use crate::synthdata::samples::build_slab;
use crate::synthdata::{normalize, read_labels, read_volume, resize2d, DatasetManifest, ResizeMode};
use crate::training::predict_classes;

/// Metrics of one task on one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub dataset: String,
    pub subject: String,
    pub task_id: usize,
    /// Ground truth came from an eval-only label.
    pub eval_only: bool,
    pub slices: Vec<usize>,
    pub slice_dice: Vec<f64>,
    pub slice_assd: Vec<Assd>,
}

impl TaskResult {
    /// Mean Dice over evaluated slices.
    pub fn dice(&self) -> f64 {
        self.slice_dice.iter().sum::<f64>() / self.slice_dice.len().max(1) as f64
    }

    /// Mean ASSD over slices with a non-empty prediction.
    pub fn assd(&self) -> Option<f64> {
        let v: Vec<f64> = self.slice_assd.iter().filter_map(|a| a.value()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn empty_predictions(&self) -> usize {
        self.slice_assd.iter().filter(|a| **a == Assd::EmptyPrediction).count()
    }
}

/// A task that could not be evaluated on a subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped {
    pub task_id: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectEval {
    pub dataset: String,
    pub subject: String,
    pub results: Vec<TaskResult>,
    pub skipped: Vec<Skipped>,
}

/// Report name of a checkpoint: the variant, plus the dataset for
/// per-dataset baselines.
pub fn method_name(meta: &CheckpointMeta) -> String {
    match meta.variant {
        Variant::BaseSingle => format!("base_single-{}", meta.datasets.join("+")),
        v => v.to_string(),
    }
}

/// Per-slice comparison of a prediction map with ground truth, after
/// resizing the prediction back to the original grid.
pub fn compare_slice(
    pred: &[u8],
    class: u8,
    model_hw: usize,
    gt: &[u8],
    (h, w): (usize, usize),
    spacing: (f64, f64),
) -> Result<(f64, Assd)> {
    let back = resize2d(pred, (model_hw, model_hw), (h, w), ResizeMode::Nearest);
    let p = BinaryMask::new(h, w, back.iter().map(|&c| c == class).collect(), spacing)?;
    let g = BinaryMask::new(h, w, gt.iter().map(|&v| v != 0).collect(), spacing)?;
    Ok((dice_coefficient(&p, &g)?, assd(&p, &g)?))
}

/// Evaluates every task of the subject's view on the slices where that
/// task's ground truth is non-empty.
pub fn evaluate_subject(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    dataset: &str,
    subject_id: &str,
    batch: usize,
) -> Result<SubjectEval> {
    let d = manifest.dataset(dataset)?;
    let subject = d.subject(subject_id).ok_or_else(|| Error::Data(format!("no subject {subject_id} in {dataset}")))?;
    let image = read_volume(&manifest.resolve(&subject.image))?;
    let norm = normalize(&image);
    let [depth, h, w] = image.dims;
    let spacing = (image.spacing[1] as f64, image.spacing[2] as f64);
    let model = &ckpt.model;
    let hw = model.config.image_hw;
    let shared_predictions = !model.config.has_task_token();
    let mut cache: HashMap<usize, Vec<u8>> = HashMap::new();
    let mut out = SubjectEval { dataset: dataset.into(), subject: subject_id.into(), results: Vec::new(), skipped: Vec::new() };
    for task in manifest.view_tasks(&d.view) {
        let (rel, eval_only) = match (subject.labels.get(&task.organ), subject.eval_only.get(&task.organ)) {
            (Some(r), _) => (r, false),
            (None, Some(r)) => (r, true),
            (None, None) => {
                out.skipped.push(Skipped { task_id: task.task_id, reason: format!("no {} ground truth", task.organ) });
                continue;
            }
        };
        let Some(class) = ckpt.meta.class_of(task.task_id) else {
            out.skipped.push(Skipped { task_id: task.task_id, reason: "task not predicted by this model".into() });
            continue;
        };
        let gt = read_labels(&manifest.resolve(rel))?;
        if gt.dims != image.dims {
            return Err(Error::Data(format!("{subject_id}: {rel} dims {:?} differ from image {:?}", gt.dims, image.dims)));
        }
        let slices: Vec<usize> = (0..depth).filter(|&z| gt.slice(z).iter().any(|&v| v != 0)).collect();
        let todo: Vec<usize> =
            slices.iter().copied().filter(|z| !(shared_predictions && cache.contains_key(z))).collect();
        let slabs: Vec<Vec<f32>> = todo.iter().map(|&z| build_slab(&norm, image.dims, z, hw)).collect();
        let refs: Vec<&[f32]> = slabs.iter().map(Vec::as_slice).collect();
        let preds = predict_classes(model, &refs, &vec![task.task_id; refs.len()], batch)?;
        let mut fresh: HashMap<usize, Vec<u8>> = todo.into_iter().zip(preds).collect();
        let mut result = TaskResult {
            dataset: dataset.into(),
            subject: subject_id.into(),
            task_id: task.task_id,
            eval_only,
            slices: slices.clone(),
            slice_dice: Vec::new(),
            slice_assd: Vec::new(),
        };
        for &z in &slices {
            let pred = fresh.get(&z).or_else(|| cache.get(&z)).expect("prediction computed");
            let (dc, sd) = compare_slice(pred, class as u8, hw, gt.slice(z), (h, w), spacing)?;
            result.slice_dice.push(dc);
            result.slice_assd.push(sd);
        }
        if shared_predictions {
            cache.extend(fresh.drain());
        }
        out.results.push(result);
    }
    Ok(out)
}

/// Evaluates a checkpoint on the given subjects (dataset -> ids).
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    subjects: &BTreeMap<String, Vec<String>>,
    batch: usize,
) -> Result<Vec<SubjectEval>> {
    let mut out = Vec::new();
    for (dataset, ids) in subjects {
        for id in ids {
            out.push(evaluate_subject(ckpt, manifest, dataset, id, batch)?);
        }
    }
    Ok(out)
}

pub struct MethodResults {
    pub method: String,
    pub subjects: Vec<SubjectEval>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub task_id: usize,
    pub eval_only: bool,
    pub mean_dice: f64,
    /// Pooled over all slices with a non-empty prediction.
    pub mean_assd_mm: Option<f64>,
    pub empty_predictions: usize,
    pub n_subjects: usize,
    /// `(subject, Dice)` in subject order.
    pub subject_dice: Vec<(String, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PValue {
    Value(f64),
    /// Every paired difference is zero.
    Ties,
    /// Too few non-zero differences for the test.
    NotAvailable,
}

impl std::fmt::Display for PValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PValue::Value(p) => write!(f, "{p:.6}"),
            PValue::Ties => f.write_str("ties"),
            PValue::NotAvailable => f.write_str("NA"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub method_a: String,
    pub method_b: String,
    pub dataset: String,
    pub task_id: usize,
    pub p_value: PValue,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub pairs: Vec<PairRow>,
}

impl MetricsReport {
    pub fn row(&self, method: &str, dataset: &str, task_id: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.dataset == dataset && r.task_id == task_id)
    }
}

fn summarize(method: &str, subjects: &[SubjectEval]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&TaskResult>> = BTreeMap::new();
    for s in subjects {
        for r in &s.results {
            groups.entry((r.dataset.clone(), r.task_id)).or_default().push(r);
        }
    }
    groups
        .into_iter()
        .map(|((dataset, task_id), results)| {
            let mut subject_dice: Vec<(String, f64)> = results.iter().map(|r| (r.subject.clone(), r.dice())).collect();
            subject_dice.sort_by(|a, b| a.0.cmp(&b.0));
            let pooled: Vec<f64> = results.iter().flat_map(|r| r.slice_assd.iter().filter_map(|a| a.value())).collect();
            ReportRow {
                method: method.into(),
                dataset,
                task_id,
                eval_only: results.iter().any(|r| r.eval_only),
                mean_dice: subject_dice.iter().map(|(_, d)| d).sum::<f64>() / subject_dice.len() as f64,
                mean_assd_mm: (!pooled.is_empty()).then(|| pooled.iter().sum::<f64>() / pooled.len() as f64),
                empty_predictions: results.iter().map(|r| r.empty_predictions()).sum(),
                n_subjects: subject_dice.len(),
                subject_dice,
            }
        })
        .collect()
}

/// Per-method means plus paired signed-rank tests of every method against
/// `reference` (default: the first method) on per-subject Dice.
pub fn aggregate_report(methods: &[MethodResults], reference: Option<&str>) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for m in methods {
        report.rows.extend(summarize(&m.method, &m.subjects));
    }
    let Some(reference) = reference.or(methods.first().map(|m| m.method.as_str())) else {
        return Ok(report);
    };
    let ref_rows: Vec<ReportRow> = report.rows.iter().filter(|r| r.method == reference).cloned().collect();
    for m in methods.iter().filter(|m| m.method != reference) {
        for a in report.rows.iter().filter(|r| r.method == m.method) {
            let Some(b) = ref_rows.iter().find(|r| r.dataset == a.dataset && r.task_id == a.task_id) else { continue };
            let ids_a: Vec<&String> = a.subject_dice.iter().map(|(s, _)| s).collect();
            let ids_b: Vec<&String> = b.subject_dice.iter().map(|(s, _)| s).collect();
            if ids_a != ids_b {
                return Err(Error::Stats(format!(
                    "{} and {} were evaluated on different subjects for {} task {}",
                    a.method, b.method, a.dataset, a.task_id
                )));
            }
            let xa: Vec<f64> = a.subject_dice.iter().map(|(_, d)| *d).collect();
            let xb: Vec<f64> = b.subject_dice.iter().map(|(_, d)| *d).collect();
            let p_value = match wilcoxon_signed_rank(&xa, &xb) {
                Ok(r) => PValue::Value(r.p_value),
                Err(_) if xa == xb => PValue::Ties,
                Err(_) => PValue::NotAvailable,
            };
            report.pairs.push(PairRow {
                method_a: a.method.clone(),
                method_b: b.method.clone(),
                dataset: a.dataset.clone(),
                task_id: a.task_id,
                p_value,
                n_pairs: xa.len(),
            });
        }
    }
    Ok(report)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

pub const REPORT_HEADER: [&str; 7] =
    ["method", "dataset", "task", "mean_dice", "mean_assd_mm", "empty_predictions", "n_subjects"];
pub const PAIRWISE_HEADER: [&str; 6] = ["method_a", "method_b", "dataset", "task", "p_value", "n_pairs"];

pub fn write_report_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(REPORT_HEADER).map_err(csv_err(path))?;
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            r.dataset.clone(),
            r.task_id.to_string(),
            format!("{:.6}", r.mean_dice),
            r.mean_assd_mm.map_or("NA".into(), |v| format!("{v:.6}")),
            r.empty_predictions.to_string(),
            r.n_subjects.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_pairwise_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(PAIRWISE_HEADER).map_err(csv_err(path))?;
    for p in &report.pairs {
        w.write_record([
            p.method_a.clone(),
            p.method_b.clone(),
            p.dataset.clone(),
            p.task_id.to_string(),
            p.p_value.to_string(),
            p.n_pairs.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
