//! Synthetic partially labelled datasets, `.mvol` IO and slab extraction.

pub mod generate;
pub mod manifest;
pub mod mvol;
pub mod resize;
pub mod samples;

pub use generate::{generate_subject, generate_suite, KIDNEY, LIVER, SPLEEN, VIEW_A, VIEW_B};
pub use manifest::{DatasetManifest, DatasetRecord, Scale, SubjectRecord, TaskSpec, MANIFEST_FILE};
pub use mvol::{read_labels, read_volume, write_labels, write_volume, LabelVolume, Volume};
pub use resize::{resize2d, ResizeMode};
pub use samples::{extract_multi_samples, extract_samples, merge_labels, normalize, slab_indices, MultiOrganSample, SliceSample};
