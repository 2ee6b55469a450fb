//! Seeded synthetic abdomen-like volumes with partial annotations.
//!
//! Both views show a body outline with a liver, a spleen and a pair of
//! kidneys. Spleen and kidney intensity bands overlap, so the two are told
//! apart by position and shape. Datasets annotate different organ subsets of
//! the same anatomy, which is what creates label conflict for a naive
//! multi-class model.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::synthdata::manifest::{DatasetManifest, DatasetRecord, Scale, SubjectRecord, TaskSpec};
use crate::synthdata::mvol::{write_labels, write_volume, LabelVolume, Volume};

pub const LIVER: &str = "liver";
pub const SPLEEN: &str = "spleen";
pub const KIDNEY: &str = "kidney";
pub const VIEW_A: &str = "view-a";
pub const VIEW_B: &str = "view-b";

/// Static description of one generated dataset.
pub struct DatasetDef {
    pub name: &'static str,
    pub view: &'static str,
    pub train: &'static [&'static str],
    pub eval_only: &'static [&'static str],
}

pub const DATASETS: [DatasetDef; 4] = [
    DatasetDef { name: "S1", view: VIEW_A, train: &[LIVER], eval_only: &[SPLEEN] },
    DatasetDef { name: "S2", view: VIEW_A, train: &[LIVER, SPLEEN], eval_only: &[] },
    DatasetDef { name: "S3", view: VIEW_B, train: &[SPLEEN], eval_only: &[] },
    DatasetDef { name: "S4", view: VIEW_B, train: &[KIDNEY], eval_only: &[] },
];

/// (view, organ, defining dataset) for task ids 1..=4.
pub const TASKS: [(&str, &str, &str); 4] =
    [(VIEW_A, LIVER, "S1"), (VIEW_A, SPLEEN, "S2"), (VIEW_B, SPLEEN, "S3"), (VIEW_B, KIDNEY, "S4")];

const ORGANS: [&str; 3] = [LIVER, SPLEEN, KIDNEY];

/// Ellipsoid with a wobbly in-plane outline, in normalized (z, y, x).
#[derive(Clone, Debug)]
struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn contains(&self, p: [f64; 3]) -> bool {
        let dz = (p[0] - self.center[0]) / self.radii[0];
        let (sy, sx) = (p[1] - self.center[1], p[2] - self.center[2]);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let dy = (c * sy - s * sx) / self.radii[1];
        let dx = (s * sy + c * sx) / self.radii[2];
        let phi = dy.atan2(dx);
        let wobble: f64 = self.harmonics.iter().enumerate().map(|(k, &(a, ph))| a * ((k + 2) as f64 * phi + ph).cos()).sum();
        (dz * dz + dy * dy + dx * dx).sqrt() <= 1.0 + wobble
    }
}

struct Layout {
    body: ([f64; 2], [f64; 2]),
    /// (organ, center (z, y, x), radii (z, y, x))
    organs: Vec<(&'static str, [f64; 3], [f64; 3])>,
}

fn layout(view: &str) -> Layout {
    match view {
        VIEW_A => Layout {
            body: ([0.5, 0.5], [0.36, 0.46]),
            organs: vec![
                (LIVER, [0.48, 0.41, 0.31], [0.40, 0.16, 0.15]),
                (SPLEEN, [0.45, 0.52, 0.76], [0.30, 0.11, 0.085]),
                (KIDNEY, [0.55, 0.69, 0.38], [0.28, 0.085, 0.065]),
                (KIDNEY, [0.55, 0.69, 0.62], [0.28, 0.085, 0.065]),
            ],
        },
        _ => Layout {
            body: ([0.5, 0.5], [0.46, 0.36]),
            organs: vec![
                (LIVER, [0.50, 0.33, 0.33], [0.40, 0.13, 0.18]),
                (SPLEEN, [0.52, 0.33, 0.71], [0.32, 0.13, 0.09]),
                (KIDNEY, [0.55, 0.60, 0.38], [0.30, 0.11, 0.065]),
                (KIDNEY, [0.55, 0.60, 0.62], [0.30, 0.11, 0.065]),
            ],
        },
    }
}

fn base_intensity(organ: &str) -> f64 {
    match organ {
        LIVER => 0.50,
        SPLEEN => 0.80,
        _ => 0.64,
    }
}

/// One subject: intensities and, per organ, a voxel ownership mask.
pub struct Subject {
    pub image: Volume,
    pub masks: BTreeMap<&'static str, Vec<bool>>,
}

/// Deterministic subject generator. `stream` separates subjects drawn from
/// the same seed.
pub fn generate_subject(seed: u64, stream: u64, view: &str, scale: Scale) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let [d, h, w] = scale.dims();
    let lay = layout(view);
    let mut jitter = |spread: f64| rng.random_range(-spread..spread);
    let body_c = [lay.body.0[0] + jitter(0.02), lay.body.0[1] + jitter(0.02)];
    let body_r = [lay.body.1[0] * (1.0 + jitter(0.06)), lay.body.1[1] * (1.0 + jitter(0.06))];
    let blobs: Vec<(&'static str, Blob, f64)> = lay
        .organs
        .iter()
        .map(|&(organ, c, r)| {
            let blob = Blob {
                center: [c[0] + jitter(0.04), c[1] + jitter(0.03), c[2] + jitter(0.03)],
                radii: [r[0] * (1.0 + jitter(0.12)), r[1] * (1.0 + jitter(0.15)), r[2] * (1.0 + jitter(0.15))],
                angle: jitter(PI / 12.0),
                harmonics: [(jitter(0.06), jitter(PI)), (jitter(0.04), jitter(PI)), (jitter(0.03), jitter(PI))],
            };
            (organ, blob, base_intensity(organ) + jitter(0.03))
        })
        .collect();
    let tissue = 0.30 + jitter(0.03);
    let bias = [jitter(PI), jitter(PI), 0.06 + jitter(0.03)];
    let noise = Normal::new(0.0, 0.05).unwrap();

    let mut data = vec![0f32; d * h * w];
    let mut masks: BTreeMap<&'static str, Vec<bool>> = ORGANS.iter().map(|&o| (o, vec![false; d * h * w])).collect();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [(z as f64 + 0.5) / d as f64, (y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64];
                let i = (z * h + y) * w + x;
                let by = (p[1] - body_c[0]) / body_r[0];
                let bx = (p[2] - body_c[1]) / body_r[1];
                let mut value = 0.02;
                if by * by + bx * bx <= 1.0 {
                    value = tissue;
                    for (organ, blob, intensity) in &blobs {
                        if blob.contains(p) {
                            value = *intensity;
                            for m in masks.values_mut() {
                                m[i] = false;
                            }
                            masks.get_mut(organ).unwrap()[i] = true;
                        }
                    }
                    value *= 1.0 + bias[2] * (2.0 * PI * p[1] + bias[0]).sin() * (2.0 * PI * p[2] + bias[1]).cos();
                }
                data[i] = (value + noise.sample(&mut rng)) as f32;
            }
        }
    }
    Subject { image: Volume { dims: [d, h, w], spacing: scale.spacing(), data }, masks }
}

fn label_volume(mask: &[bool], id: u8, image: &Volume) -> LabelVolume {
    LabelVolume { dims: image.dims, spacing: image.spacing, data: mask.iter().map(|&m| if m { id } else { 0 }).collect() }
}

/// Writes the four datasets under `root` and returns the saved manifest.
pub fn generate_suite(root: &Path, seed: u64, scale: Scale) -> Result<DatasetManifest> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let tasks: Vec<TaskSpec> = TASKS
        .iter()
        .enumerate()
        .map(|(i, &(view, organ, ds))| {
            let def = DATASETS.iter().find(|d| d.name == ds).unwrap();
            let label = def.train.iter().position(|&o| o == organ).unwrap() + 1;
            TaskSpec {
                task_id: i + 1,
                dataset_name: ds.into(),
                view: view.into(),
                organ: organ.into(),
                foreground_label: label as u8,
            }
        })
        .collect();
    let mut datasets = Vec::new();
    for (di, (def, &count)) in DATASETS.iter().zip(scale.subject_counts().iter()).enumerate() {
        let organs: Vec<&str> = def.train.iter().chain(def.eval_only).copied().collect();
        let label_ids: BTreeMap<String, u8> =
            organs.iter().enumerate().map(|(i, o)| (o.to_string(), (i + 1) as u8)).collect();
        let organ_tasks: BTreeMap<String, usize> = organs
            .iter()
            .map(|o| (o.to_string(), tasks.iter().find(|t| t.view == def.view && t.organ == *o).unwrap().task_id))
            .collect();
        let mut subjects = Vec::new();
        for si in 0..count {
            let id = format!("{}-{si:03}", def.name);
            let subject = generate_subject(seed, ((di as u64) << 32) | si as u64, def.view, scale);
            let dir = format!("{}/{id}", def.name);
            let image = format!("{dir}/image.mvol");
            write_volume(&root.join(&image), &subject.image)?;
            let write_set = |names: &[&str], sub: &str| -> Result<BTreeMap<String, String>> {
                let mut out = BTreeMap::new();
                for &organ in names {
                    let rel = format!("{dir}/{sub}/{organ}.mvol");
                    write_labels(&root.join(&rel), &label_volume(&subject.masks[organ], label_ids[organ], &subject.image))?;
                    out.insert(organ.to_string(), rel);
                }
                Ok(out)
            };
            let labels = write_set(def.train, "labels")?;
            let eval_only = write_set(def.eval_only, "eval_only")?;
            subjects.push(SubjectRecord { id, image, labels, eval_only });
        }
        datasets.push(DatasetRecord { name: def.name.into(), view: def.view.into(), label_ids, organ_tasks, subjects });
    }
    let manifest = DatasetManifest { seed, scale, tasks, datasets, root: root.to_path_buf() };
    manifest.save()?;
    manifest.validate()?;
    Ok(manifest)
}
