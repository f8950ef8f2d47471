//! Synthetic phantoms, volume slicing and on-disk datasets.

mod dataset;
mod phantom;
mod record;
mod volume;

pub use dataset::{
    load_dataset, phantom_records, read_manifest, write_manifest, write_phantom_dataset, write_subject,
    PhantomDatasetConfig, Split, SubjectEntry, DATASET_MANIFEST, HEALTHY_FILE, IMAGE_FILE, TUMOR_FILE,
};
pub use phantom::{generate_phantom, PhantomSpec};
pub use record::{mask_apply, SliceRecord};
pub use volume::{normalize_volume, slice_volume, NORMALIZE_EPS};
