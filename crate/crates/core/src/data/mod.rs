//! Dataset manifests, the `MSL1` feature format, moment-to-video ratio
//! grouping, and the planted-moment synthetic generator.

mod feature;
mod manifest;
mod mv;
mod synth;

pub use feature::{read_feature_header, read_feature_matrix, write_feature_matrix, FeatureMatrix};
pub use manifest::{
    load_manifest, save_manifest, DatasetManifest, FeatureSplit, Moment, QueryEntry, Split,
    VideoEntry,
};
pub use mv::{equal_count_edges, group_queries_by_mv, moment_to_video_ratio, MvGroup};
pub use synth::{
    generate_synthetic, recover_topics, write_synthetic, SyntheticDataset, SyntheticSpec,
    SyntheticSplit,
};
