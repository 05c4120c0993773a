//! Cube and mask files, synthetic datasets, patch-pair sampling and cube
//! scheduling.

mod format;
mod manifest;
mod patch;
mod scheduler;
mod synth;

pub use format::{
    load_cube, load_cube_into, load_mask, read_cube_header, save_cube, save_mask, CubeHeader, GroundTruthMask, HsiCube,
    CUBE_HEADER_LEN, CUBE_MAGIC, FORMAT_VERSION, MASK_HEADER_LEN, MASK_MAGIC,
};
pub use manifest::{DatasetEntry, Manifest, MANIFEST_NAME};
pub use patch::{overlap_feasible, patch_pair_at, sample_patch_pair, PatchPair};
pub use scheduler::{
    visit_order, CubeScheduler, Cursor, Draw, LoadMode, Residency, SchedulerConfig, TrackedCube,
};
pub use synth::{class_spectrum, generate_one, generate_synthetic, spectral_angle, SynthSpec};
