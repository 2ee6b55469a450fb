//! 2.5D training samples: three neighbouring slices in, middle-slice label out.

use crate::synthdata::mvol::{LabelVolume, Volume};
use crate::synthdata::resize::{resize2d, ResizeMode};

/// One slab with a binary (or, for the multi-class baseline, multi-class)
/// middle-slice target at the model resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    /// `[3, hw, hw]`, channels ordered (z-1, z, z+1).
    pub slab: Vec<f32>,
    /// `[hw, hw]` class ids.
    pub target: Vec<u8>,
    pub task_id: usize,
    pub subject: String,
    pub slice: usize,
    pub dataset: String,
    pub hw: usize,
}

/// A slab whose target carries several organs, before splitting into
/// per-task binary samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiOrganSample {
    pub slab: Vec<f32>,
    /// `[hw, hw]` label ids of the source dataset.
    pub labels: Vec<u8>,
    /// `(label id, task id)` for every organ annotated in the dataset.
    pub label_tasks: Vec<(u8, usize)>,
    pub subject: String,
    pub slice: usize,
    pub dataset: String,
    pub hw: usize,
}

/// Per-volume z-score.
pub fn normalize(volume: &Volume) -> Vec<f32> {
    let n = volume.data.len() as f64;
    let mean = volume.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    volume.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
}

/// Slice indices of the slab centred on `z`, replicating edge slices.
pub fn slab_indices(z: usize, depth: usize) -> [usize; 3] {
    [z.saturating_sub(1), z, (z + 1).min(depth - 1)]
}

/// Builds the resized slab around `z` from normalized intensities.
pub fn build_slab(normalized: &[f32], dims: [usize; 3], z: usize, hw: usize) -> Vec<f32> {
    let [d, h, w] = dims;
    let px = h * w;
    slab_indices(z, d)
        .iter()
        .flat_map(|&s| resize2d(&normalized[s * px..(s + 1) * px], (h, w), (hw, hw), ResizeMode::Bilinear))
        .collect()
}

fn labelled_slices(labels: &LabelVolume) -> impl Iterator<Item = usize> + '_ {
    (0..labels.dims[0]).filter(|&z| labels.slice(z).iter().any(|&v| v != 0))
}

fn check_dims(volume: &Volume, labels: &LabelVolume) {
    assert_eq!(volume.dims, labels.dims, "image and label dims differ");
}

/// Binary samples for every slice whose label is non-empty. Any non-zero
/// label value counts as foreground.
pub fn extract_samples(
    volume: &Volume,
    labels: &LabelVolume,
    task_id: usize,
    hw: usize,
    subject: &str,
    dataset: &str,
) -> Vec<SliceSample> {
    check_dims(volume, labels);
    let norm = normalize(volume);
    let (h, w) = (labels.dims[1], labels.dims[2]);
    labelled_slices(labels)
        .map(|z| {
            let binary: Vec<u8> = labels.slice(z).iter().map(|&v| u8::from(v != 0)).collect();
            SliceSample {
                slab: build_slab(&norm, volume.dims, z, hw),
                target: resize2d(&binary, (h, w), (hw, hw), ResizeMode::Nearest),
                task_id,
                subject: subject.into(),
                slice: z,
                dataset: dataset.into(),
                hw,
            }
        })
        .collect()
}

/// Multi-organ samples for every slice where any organ is labelled.
pub fn extract_multi_samples(
    volume: &Volume,
    labels: &LabelVolume,
    label_tasks: &[(u8, usize)],
    hw: usize,
    subject: &str,
    dataset: &str,
) -> Vec<MultiOrganSample> {
    check_dims(volume, labels);
    let norm = normalize(volume);
    let (h, w) = (labels.dims[1], labels.dims[2]);
    labelled_slices(labels)
        .map(|z| MultiOrganSample {
            slab: build_slab(&norm, volume.dims, z, hw),
            labels: resize2d(labels.slice(z), (h, w), (hw, hw), ResizeMode::Nearest),
            label_tasks: label_tasks.to_vec(),
            subject: subject.into(),
            slice: z,
            dataset: dataset.into(),
            hw,
        })
        .collect()
}

/// Merges per-organ label volumes (values `0` or the organ's id) into one.
pub fn merge_labels(parts: &[&LabelVolume]) -> LabelVolume {
    let first = parts[0];
    let mut data = vec![0u8; first.data.len()];
    for part in parts {
        assert_eq!(part.dims, first.dims, "label dims differ");
        for (o, &v) in data.iter_mut().zip(&part.data) {
            if v != 0 {
                *o = v;
            }
        }
    }
    LabelVolume { dims: first.dims, spacing: first.spacing, data }
}
