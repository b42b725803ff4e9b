//! File formats: PNG label maps, JSON instance lists with RLE masks, raw
//! little-endian tensors and the per-image dataset layout.

mod dataset;
mod json;
mod png;
mod raw;

use std::path::Path;

use crate::error::Error;

pub use dataset::{
    load_pair, save_branches, save_bundle, Bundles, DatasetLayout, AMODAL, AMODAL_PANOPTIC, AMODAL_SEGMENTS,
    BRANCH_FILES, BUNDLE_FILES, IMAGE, INSTANCES, PANOPTIC, SEMANTIC,
};
pub use json::{
    instances_from_json, instances_to_json, load_amodal_segments, load_instances, save_amodal_segments, save_instances,
};
pub use png::{load_panoptic, load_rgb, load_semantic, save_mask, save_panoptic, save_rgb, save_semantic};
pub use raw::{
    load_probs, load_tensor, probs_from_bytes, probs_to_bytes, save_probs, save_tensor, tensor_from_bytes,
    tensor_to_bytes, PROB_FILE_TOL, PROB_MAGIC, TENSOR_MAGIC,
};

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
