//! Dataset construction: retrospective k-space undersampling and motion
//! corruption, procedural phantom pairs, ingestion and subject-level splits.

mod dataset;
mod kspace;
mod phantom;

pub use dataset::{
    load_image_dir, normalize_minmax, LoadedImage, MANIFEST_SCHEMA_VERSION, pairs_from_clean, pairs_from_dirs, split_subjects,
    subset_supervision, DatasetManifest, ManifestFile, NormConstants, PairedSample, SampleEntry,
    Split, Splits,
};
pub use kspace::{
    fft2, ifft2_real, kspace_mask, rotate_bilinear, simulate_motion, undersample_kspace,
    MaskShape, MotionParams,
};
pub use phantom::{gaussian_blur, phantom_slice, procedural_pairs, PhantomParams};
