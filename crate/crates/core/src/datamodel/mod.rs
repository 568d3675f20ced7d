//! Sessions, manifests, segmentation, subject-level splits and the synthetic
//! corpus generator.

mod manifest;
mod segment;
mod split;
mod synth;

pub use manifest::{
    load_manifest, save_manifest, Manifest, SegmentRef, Session, MANIFEST_VERSION, SEVERITY_MAX, SEVERITY_MIN,
};
pub use segment::{
    segment_frames, segment_plan, segment_series, TimeSeriesSegment, CHANNELS, CHANNEL_NAMES, DEFAULT_FRAME_RATE,
    DEFAULT_SEGMENT_SECONDS,
};
pub use split::{apportion, make_splits, Fold, SplitAssignment, DEFAULT_RATIOS};
pub use synth::{coupling_strength, synth_dataset, SyntheticConfig};
