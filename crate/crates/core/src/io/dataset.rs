//! Flat per-image file layout. Image `<id>` owns:
//!
//! | file | content |
//! |---|---|
//! | `<id>_semantic.png` | 8-bit class map |
//! | `<id>_instances.json` | instance masks |
//! | `<id>_amodal.json` | amodal instance masks |
//! | `<id>_panoptic.png` | 16-bit panoptic ids |
//! | `<id>_amodal_panoptic.png` | 16-bit ids of the amodal panoptic output |
//! | `<id>_amodal_segments.json` | its full-extent segments |
//! | `<id>_image.png` | RGB image (optional) |
//!
//! Branch-output directories (input to fusion) hold only the first three.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{dims_mismatch, Error, Result};
use crate::fusion::{BranchOutputs, OassOutputs};
use crate::io::io_err;
use crate::io::json::{load_amodal_segments, load_instances, save_amodal_segments, save_instances};
use crate::io::png::{load_panoptic, load_semantic, save_panoptic, save_semantic};
use crate::labels::{AmodalPanoptic, Taxonomy};

pub const SEMANTIC: &str = "_semantic.png";
pub const INSTANCES: &str = "_instances.json";
pub const AMODAL: &str = "_amodal.json";
pub const PANOPTIC: &str = "_panoptic.png";
pub const AMODAL_PANOPTIC: &str = "_amodal_panoptic.png";
pub const AMODAL_SEGMENTS: &str = "_amodal_segments.json";
pub const IMAGE: &str = "_image.png";

/// Image bundles keyed by id.
pub type Bundles = Vec<(String, OassOutputs)>;

pub const BRANCH_FILES: [&str; 3] = [SEMANTIC, INSTANCES, AMODAL];
pub const BUNDLE_FILES: [&str; 6] = [SEMANTIC, INSTANCES, AMODAL, PANOPTIC, AMODAL_PANOPTIC, AMODAL_SEGMENTS];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    /// Sorted, unique.
    pub ids: Vec<String>,
}

impl DatasetLayout {
    /// Collects ids from `*_semantic.png` and checks that every `required`
    /// file exists for each.
    pub fn scan(root: &Path, required: &[&str]) -> Result<Self> {
        let entries = fs::read_dir(root).map_err(|e| io_err(root, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| io_err(root, e))?;
            let name = entry.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(SEMANTIC)) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        let layout = Self {
            root: root.to_path_buf(),
            ids,
        };
        for id in &layout.ids {
            for suffix in required {
                let p = layout.path(id, suffix);
                if !p.is_file() {
                    return Err(Error::MissingPair(format!("{} (required for image {id})", p.display())));
                }
            }
        }
        Ok(layout)
    }

    pub fn path(&self, id: &str, suffix: &str) -> PathBuf {
        self.root.join(format!("{id}{suffix}"))
    }

    pub fn image_path(&self, id: &str) -> Option<PathBuf> {
        Some(self.path(id, IMAGE)).filter(|p| p.is_file())
    }

    pub fn load_branches(&self, id: &str, taxonomy: &Taxonomy) -> Result<BranchOutputs> {
        let semantic = load_semantic(&self.path(id, SEMANTIC), taxonomy.num_classes())?;
        let (d1, instances) = load_instances(&self.path(id, INSTANCES))?;
        let (d2, amodal_instances) = load_instances(&self.path(id, AMODAL))?;
        for d in [d1, d2] {
            if d != semantic.dims() {
                return Err(dims_mismatch(semantic.dims(), d));
            }
        }
        Ok(BranchOutputs {
            semantic,
            instances,
            amodal_instances,
        })
    }

    pub fn load_bundle(&self, id: &str, taxonomy: &Taxonomy) -> Result<OassOutputs> {
        let b = self.load_branches(id, taxonomy)?;
        let panoptic = load_panoptic(&self.path(id, PANOPTIC), taxonomy)?;
        let amodal_map = load_panoptic(&self.path(id, AMODAL_PANOPTIC), taxonomy)?;
        let (d, segments) = load_amodal_segments(&self.path(id, AMODAL_SEGMENTS))?;
        for dims in [panoptic.dims(), amodal_map.dims(), d] {
            if dims != b.semantic.dims() {
                return Err(dims_mismatch(b.semantic.dims(), dims));
            }
        }
        Ok(OassOutputs {
            semantic: b.semantic,
            instances: b.instances,
            amodal_instances: b.amodal_instances,
            panoptic,
            amodal_panoptic: AmodalPanoptic {
                map: amodal_map,
                segments,
            },
        })
    }

    /// Every bundle, loaded in parallel, in id order.
    pub fn load_all(&self, taxonomy: &Taxonomy) -> Result<Bundles> {
        self.ids
            .par_iter()
            .map(|id| Ok((id.clone(), self.load_bundle(id, taxonomy)?)))
            .collect()
    }
}

pub fn save_branches(dir: &Path, id: &str, b: &BranchOutputs) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let dims = b.semantic.dims();
    save_semantic(&dir.join(format!("{id}{SEMANTIC}")), &b.semantic)?;
    save_instances(&dir.join(format!("{id}{INSTANCES}")), dims, &b.instances)?;
    save_instances(&dir.join(format!("{id}{AMODAL}")), dims, &b.amodal_instances)
}

pub fn save_bundle(dir: &Path, id: &str, o: &OassOutputs) -> Result<()> {
    save_branches(
        dir,
        id,
        &BranchOutputs {
            semantic: o.semantic.clone(),
            instances: o.instances.clone(),
            amodal_instances: o.amodal_instances.clone(),
        },
    )?;
    save_panoptic(&dir.join(format!("{id}{PANOPTIC}")), &o.panoptic)?;
    save_panoptic(&dir.join(format!("{id}{AMODAL_PANOPTIC}")), &o.amodal_panoptic.map)?;
    save_amodal_segments(
        &dir.join(format!("{id}{AMODAL_SEGMENTS}")),
        o.semantic.dims(),
        &o.amodal_panoptic.segments,
    )
}

/// Loads both directories and pairs them by id.
pub fn load_pair(pred: &Path, gt: &Path, taxonomy: &Taxonomy) -> Result<(Bundles, Bundles)> {
    let p = DatasetLayout::scan(pred, &BUNDLE_FILES)?;
    let g = DatasetLayout::scan(gt, &BUNDLE_FILES)?;
    if g.ids.is_empty() {
        return Err(Error::MissingPair(format!("no images in {}", gt.display())));
    }
    Ok((p.load_all(taxonomy)?, g.load_all(taxonomy)?))
}
