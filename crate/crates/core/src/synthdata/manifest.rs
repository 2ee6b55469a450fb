//! Dataset manifest: datasets, subjects, label files and the task table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Full,
}

impl Scale {
    /// Volume dims (D, H, W).
    pub fn dims(self) -> [usize; 3] {
        match self {
            Scale::Desk => [12, 64, 64],
            Scale::Full => [35, 256, 256],
        }
    }

    /// Millimetres per voxel (z, y, x).
    pub fn spacing(self) -> [f32; 3] {
        match self {
            Scale::Desk => [7.0, 7.0, 7.0],
            Scale::Full => [7.0, 1.75, 1.75],
        }
    }

    /// Subjects in S1..S4.
    pub fn subject_counts(self) -> [usize; 4] {
        match self {
            Scale::Desk => [6, 6, 5, 25],
            Scale::Full => [18, 17, 20, 100],
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Config(format!("unknown scale `{s}` (expected desk or full)"))),
        }
    }
}

/// One segmentation task: an organ seen in one view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Dataset whose annotations define the task.
    pub dataset_name: String,
    pub view: String,
    pub organ: String,
    /// Label value of the organ inside `dataset_name`'s label files.
    pub foreground_label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Paths relative to the manifest directory.
    pub image: String,
    pub labels: BTreeMap<String, String>,
    pub eval_only: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: String,
    pub view: String,
    /// Organ to label value, covering training and eval-only labels.
    pub label_ids: BTreeMap<String, u8>,
    /// Organ to task id, covering training and eval-only labels.
    pub organ_tasks: BTreeMap<String, usize>,
    pub subjects: Vec<SubjectRecord>,
}

impl DatasetRecord {
    /// Organs annotated for training, in label-id order.
    pub fn train_organs(&self) -> Vec<String> {
        let mut organs: Vec<&String> = self.subjects.first().map(|s| s.labels.keys().collect()).unwrap_or_default();
        organs.sort_by_key(|o| self.label_ids.get(*o).copied().unwrap_or(u8::MAX));
        organs.into_iter().cloned().collect()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub scale: Scale,
    pub tasks: Vec<TaskSpec>,
    pub datasets: Vec<DatasetRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetRecord> {
        self.datasets.iter().find(|d| d.name == name).ok_or_else(|| Error::Data(format!("no dataset named `{name}`")))
    }

    pub fn task(&self, id: usize) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    /// Tasks defined for `view`, in id order.
    pub fn view_tasks(&self, view: &str) -> Vec<&TaskSpec> {
        self.tasks.iter().filter(|t| t.view == view).collect()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Checks structural consistency and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(msg));
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_id != i + 1 {
                return bad(format!("task ids must run 1..K in order, found {} at position {i}", t.task_id));
            }
            if self.tasks[..i].iter().any(|u| u.view == t.view && u.organ == t.organ) {
                return bad(format!("duplicate task for {} / {}", t.view, t.organ));
            }
        }
        for d in &self.datasets {
            for (organ, &task_id) in &d.organ_tasks {
                match self.task(task_id) {
                    Some(t) if t.view == d.view && &t.organ == organ => {}
                    _ => return bad(format!("dataset {}: organ {organ} mapped to inconsistent task {task_id}", d.name)),
                }
                if !d.label_ids.contains_key(organ) {
                    return bad(format!("dataset {}: organ {organ} has no label id", d.name));
                }
            }
            for s in &d.subjects {
                for organ in s.eval_only.keys() {
                    if s.labels.contains_key(organ) {
                        return bad(format!("{}/{}: {organ} is both a training and an eval-only label", d.name, s.id));
                    }
                }
                for organ in s.labels.keys().chain(s.eval_only.keys()) {
                    if !d.organ_tasks.contains_key(organ) {
                        return bad(format!("{}/{}: organ {organ} has no task", d.name, s.id));
                    }
                }
                for rel in std::iter::once(&s.image).chain(s.labels.values()).chain(s.eval_only.values()) {
                    if !self.resolve(rel).is_file() {
                        return bad(format!("{}/{}: missing file {rel}", d.name, s.id));
                    }
                }
            }
        }
        Ok(())
    }
}
