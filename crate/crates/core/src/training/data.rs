//! Turning manifest subjects into training samples for each variant.

use std::collections::BTreeMap;

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::synthdata::{
    extract_multi_samples, merge_labels, read_labels, read_volume, DatasetManifest, DatasetRecord, MultiOrganSample,
    SliceSample,
};

/// Splits a multi-organ sample into one binary sample per organ labelled in
/// the slice, each tagged with that organ's task.
pub fn split_multiclass(sample: &MultiOrganSample) -> Vec<SliceSample> {
    sample
        .label_tasks
        .iter()
        .filter_map(|&(label, task_id)| {
            let target: Vec<u8> = sample.labels.iter().map(|&v| u8::from(v == label)).collect();
            target.contains(&1).then(|| SliceSample {
                slab: sample.slab.clone(),
                target,
                task_id,
                subject: sample.subject.clone(),
                slice: sample.slice,
                dataset: sample.dataset.clone(),
                hw: sample.hw,
            })
        })
        .collect()
}

/// Which datasets a variant trains on, how many output classes it has and
/// which class stands for each task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskMapping {
    pub datasets: Vec<String>,
    pub n_classes: usize,
    /// `(task_id, class)`.
    pub task_classes: Vec<(usize, usize)>,
}

impl TaskMapping {
    pub fn new(manifest: &DatasetManifest, variant: Variant, dataset: Option<&str>) -> Result<Self> {
        let tasks = || manifest.tasks.iter().map(|t| t.task_id);
        match variant {
            Variant::MoCtrans => Ok(Self {
                datasets: manifest.datasets.iter().map(|d| d.name.clone()).collect(),
                n_classes: 2,
                task_classes: tasks().map(|t| (t, 1)).collect(),
            }),
            Variant::BaseMulti => Ok(Self {
                datasets: manifest.datasets.iter().map(|d| d.name.clone()).collect(),
                n_classes: manifest.n_tasks() + 1,
                task_classes: tasks().map(|t| (t, t)).collect(),
            }),
            Variant::BaseSingle => {
                let name = dataset.ok_or_else(|| Error::Config("base_single needs a dataset".into()))?;
                let d = manifest.dataset(name).map_err(|e| Error::Config(e.to_string()))?;
                let organs = d.train_organs();
                let task_classes = organs.iter().enumerate().map(|(i, o)| (d.organ_tasks[o], i + 1)).collect();
                Ok(Self { datasets: vec![name.to_string()], n_classes: organs.len() + 1, task_classes })
            }
        }
    }

    pub fn class_of(&self, task_id: usize) -> Option<usize> {
        self.task_classes.iter().find(|(t, _)| *t == task_id).map(|&(_, c)| c)
    }
}

/// Multi-organ samples of one subject from its training labels.
pub fn subject_multi_samples(
    manifest: &DatasetManifest,
    dataset: &DatasetRecord,
    subject_id: &str,
    hw: usize,
) -> Result<Vec<MultiOrganSample>> {
    let subject = dataset
        .subject(subject_id)
        .ok_or_else(|| Error::Data(format!("subject {subject_id} not in dataset {}", dataset.name)))?;
    let image = read_volume(&manifest.resolve(&subject.image))?;
    let parts = subject.labels.values().map(|rel| read_labels(&manifest.resolve(rel))).collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(p) = parts.iter().find(|p| p.dims != image.dims) {
        return Err(Error::Data(format!("{subject_id}: label dims {:?} differ from image {:?}", p.dims, image.dims)));
    }
    let merged = merge_labels(&parts.iter().collect::<Vec<_>>());
    let label_tasks: Vec<(u8, usize)> =
        subject.labels.keys().map(|organ| (dataset.label_ids[organ], dataset.organ_tasks[organ])).collect();
    Ok(extract_multi_samples(&image, &merged, &label_tasks, hw, subject_id, &dataset.name))
}

/// Training samples of `subjects` (dataset -> ids) for a variant. Targets
/// are class ids under `mapping`.
pub fn build_samples(
    manifest: &DatasetManifest,
    variant: Variant,
    mapping: &TaskMapping,
    subjects: &BTreeMap<String, Vec<String>>,
    hw: usize,
) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for name in &mapping.datasets {
        let Some(ids) = subjects.get(name) else { continue };
        let dataset = manifest.dataset(name)?;
        for id in ids {
            for multi in subject_multi_samples(manifest, dataset, id, hw)? {
                match variant {
                    Variant::MoCtrans => out.extend(split_multiclass(&multi)),
                    Variant::BaseMulti | Variant::BaseSingle => {
                        let lookup: BTreeMap<u8, usize> = multi
                            .label_tasks
                            .iter()
                            .map(|&(label, task)| (label, mapping.class_of(task).unwrap_or(0)))
                            .collect();
                        let target = multi.labels.iter().map(|&v| if v == 0 { 0 } else { lookup[&v] as u8 }).collect();
                        let task_id = multi.label_tasks.first().map_or(0, |&(_, t)| t);
                        out.push(SliceSample {
                            slab: multi.slab,
                            target,
                            task_id,
                            subject: multi.subject,
                            slice: multi.slice,
                            dataset: multi.dataset,
                            hw,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Binary validation samples per trained task: for each task, slices where
/// that organ is labelled, target 1 on the organ.
pub fn validation_samples(
    manifest: &DatasetManifest,
    mapping: &TaskMapping,
    subjects: &BTreeMap<String, Vec<String>>,
    hw: usize,
) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for name in &mapping.datasets {
        let Some(ids) = subjects.get(name) else { continue };
        let dataset = manifest.dataset(name)?;
        for id in ids {
            for multi in subject_multi_samples(manifest, dataset, id, hw)? {
                out.extend(split_multiclass(&multi).into_iter().filter(|s| mapping.class_of(s.task_id).is_some()));
            }
        }
    }
    Ok(out)
}
