//! Feature sets: construction, synthetic clusters, splits and the `.mefs`
//! file format.

mod feature_set;
mod format;
mod split;
mod synthetic;

pub use feature_set::FeatureSet;
pub use format::{
    decode_feature_set, encode_feature_set, manifest_path, read_feature_set, write_feature_set,
    write_manifest, FeatureManifest, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use split::{split, SplitReport, SplitSpec};
pub use synthetic::generate_synthetic;
