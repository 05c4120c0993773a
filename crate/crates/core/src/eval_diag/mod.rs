//! Full-cube segmentation, cluster merging, IoU scoring, information
//! measures over segmentations, training-phase classification and PPM output.

mod info;
mod metrics;
mod phase;
mod render;
mod segment;

pub use info::{seg_entropy, seg_mutual_information};
pub use metrics::{apply_merge, best_match_merge, iou, CoOccurrence, IoUReport, MergeMap};
pub use phase::{classify_phase, classify_timeline, PhaseLabel, PhaseThresholds, Snapshot};
pub use render::{cluster_color, encode_ppm, render_clusters, render_pseudo_rgb, write_ppm, Image};
pub use segment::{segment_cube, segment_with_state, tile_starts, SegmentationMap};
