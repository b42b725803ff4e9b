//! Label maps, the class taxonomy and per-object annotations.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::mask::BinaryMask;

pub type ClassId = u32;

/// Semantic label reserved for pixels excluded from evaluation and training.
pub const IGNORE_LABEL: u8 = 255;

/// Panoptic id reserved for void pixels.
pub const VOID_ID: u32 = 0;

/// Instance slot used by stuff segments. Class 0 is a stuff class in the
/// default taxonomy, so slot 0 would collide with the void id.
pub const STUFF_INSTANCE_INDEX: u32 = 999;

const ID_MULTIPLIER: u32 = 1000;

/// `class_id * 1000 + instance_index`.
pub fn encode_segment_id(class_id: ClassId, instance_index: u32) -> Result<u32> {
    if instance_index >= ID_MULTIPLIER {
        return Err(Error::InstanceIndexOutOfRange(instance_index));
    }
    class_id
        .checked_mul(ID_MULTIPLIER)
        .and_then(|v| v.checked_add(instance_index))
        .ok_or_else(|| Error::SegmentTable(format!("class {class_id} overflows the id space")))
}

pub fn decode_segment_id(segment_id: u32) -> (ClassId, u32) {
    (segment_id / ID_MULTIPLIER, segment_id % ID_MULTIPLIER)
}

/// Class names and the thing/stuff split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    names: Vec<String>,
    thing: Vec<bool>,
}

impl Taxonomy {
    pub fn new(classes: Vec<(String, bool)>) -> Result<Self> {
        if classes.is_empty() || classes.len() > IGNORE_LABEL as usize {
            return Err(Error::Config(format!(
                "taxonomy needs 1..=255 classes, got {}",
                classes.len()
            )));
        }
        let (names, thing) = classes.into_iter().unzip();
        Ok(Self { names, thing })
    }

    /// The 18 classes shared by the pinhole source and panoramic target
    /// domains: 11 stuff classes followed by 7 thing classes.
    pub fn oass18() -> Self {
        const STUFF: [&str; 11] = [
            "road",
            "sidewalk",
            "building",
            "wall",
            "fence",
            "pole",
            "traffic-light",
            "traffic-sign",
            "vegetation",
            "terrain",
            "sky",
        ];
        const THING: [&str; 7] = [
            "pedestrians",
            "cyclists",
            "car",
            "truck",
            "other-vehicles",
            "van",
            "two-wheeler",
        ];
        let classes = STUFF
            .iter()
            .map(|n| (n.to_string(), false))
            .chain(THING.iter().map(|n| (n.to_string(), true)))
            .collect();
        Self::new(classes).expect("static taxonomy")
    }

    /// The 19 Cityscapes train classes used by raw panoramic annotations.
    pub fn cityscapes19() -> Self {
        const NAMES: [&str; 19] = [
            "road",
            "sidewalk",
            "building",
            "wall",
            "fence",
            "pole",
            "traffic-light",
            "traffic-sign",
            "vegetation",
            "terrain",
            "sky",
            "person",
            "rider",
            "car",
            "truck",
            "bus",
            "train",
            "motorcycle",
            "bicycle",
        ];
        let classes = NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), i >= 11))
            .collect();
        Self::new(classes).expect("static taxonomy")
    }

    pub fn num_classes(&self) -> u32 {
        self.names.len() as u32
    }

    pub fn is_thing(&self, class_id: ClassId) -> bool {
        self.thing.get(class_id as usize).copied().unwrap_or(false)
    }

    pub fn name(&self, class_id: ClassId) -> Option<&str> {
        self.names.get(class_id as usize).map(String::as_str)
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name).map(|i| i as ClassId)
    }

    pub fn thing_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.num_classes()).filter(|&c| self.is_thing(c))
    }

    pub fn stuff_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.num_classes()).filter(|&c| !self.is_thing(c))
    }
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::oass18()
    }
}

/// Per-pixel class ids, row-major, with [`IGNORE_LABEL`] for unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    height: u32,
    width: u32,
    num_classes: u32,
    labels: Vec<u8>,
}

impl SemanticMap {
    pub fn new(height: u32, width: u32, num_classes: u32, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidLabels("dimensions must be positive".into()));
        }
        if labels.len() != height as usize * width as usize {
            return Err(Error::DimensionMismatch {
                expected: format!("{} labels", height as usize * width as usize),
                actual: format!("{} labels", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as u32 >= num_classes) {
            return Err(Error::InvalidLabels(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: u32, width: u32, num_classes: u32, label: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            num_classes,
            vec![label; height as usize * width as usize],
        )
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: u32, col: u32) -> u8 {
        self.labels[row as usize * self.width as usize + col as usize]
    }

    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..IGNORE_LABEL).filter(|&c| seen[c as usize]).collect()
    }

    pub fn check_dims(&self, dims: (u32, u32)) -> Result<()> {
        if self.dims() != dims {
            return Err(dims_mismatch(self.dims(), dims));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub class_id: ClassId,
    pub is_thing: bool,
}

/// Per-pixel segment ids (0 = void) plus the segment table, kept sorted
/// by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    height: u32,
    width: u32,
    ids: Vec<u32>,
    segments: Vec<SegmentInfo>,
}

impl PanopticMap {
    pub fn new(height: u32, width: u32, ids: Vec<u32>, mut segments: Vec<SegmentInfo>) -> Result<Self> {
        segments.sort_unstable_by_key(|s| s.id);
        if height == 0 || width == 0 {
            return Err(Error::InvalidLabels("dimensions must be positive".into()));
        }
        if ids.len() != height as usize * width as usize {
            return Err(Error::DimensionMismatch {
                expected: format!("{} ids", height as usize * width as usize),
                actual: format!("{} ids", ids.len()),
            });
        }
        let mut known = HashSet::with_capacity(segments.len());
        for s in &segments {
            if s.id == VOID_ID {
                return Err(Error::SegmentTable("segment id 0 is reserved for void".into()));
            }
            if !known.insert(s.id) {
                return Err(Error::SegmentTable(format!("duplicate segment id {}", s.id)));
            }
            if decode_segment_id(s.id).0 != s.class_id {
                return Err(Error::SegmentTable(format!(
                    "segment {} does not encode class {}",
                    s.id, s.class_id
                )));
            }
        }
        let mut last = VOID_ID;
        for &id in &ids {
            if id != VOID_ID && id != last && !known.contains(&id) {
                return Err(Error::SegmentTable(format!(
                    "pixel id {id} missing from the segment table"
                )));
            }
            last = id;
        }
        Ok(Self {
            height,
            width,
            ids,
            segments,
        })
    }

    /// Builds the segment table from the ids present, using the taxonomy
    /// for the thing/stuff flag.
    pub fn from_ids(height: u32, width: u32, ids: Vec<u32>, taxonomy: &Taxonomy) -> Result<Self> {
        let mut unique: Vec<u32> = Vec::new();
        let mut seen = HashSet::new();
        let mut last = VOID_ID;
        for &id in &ids {
            if id != VOID_ID && id != last && seen.insert(id) {
                unique.push(id);
            }
            last = id;
        }
        unique.sort_unstable();
        let mut segments = Vec::with_capacity(unique.len());
        for id in unique {
            let (class_id, _) = decode_segment_id(id);
            if class_id >= taxonomy.num_classes() {
                return Err(Error::SegmentTable(format!(
                    "segment {id} has class {class_id} outside the taxonomy"
                )));
            }
            segments.push(SegmentInfo {
                id,
                class_id,
                is_thing: taxonomy.is_thing(class_id),
            });
        }
        Self::new(height, width, ids, segments)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn segments(&self) -> &[SegmentInfo] {
        &self.segments
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn get(&self, row: u32, col: u32) -> u32 {
        self.ids[row as usize * self.width as usize + col as usize]
    }

    /// Mask of the pixels carrying `id`.
    pub fn segment_mask(&self, id: u32) -> BinaryMask {
        let w = self.width as usize;
        BinaryMask::from_fn(self.height, self.width, |r, c| {
            self.ids[r as usize * w + c as usize] == id
        })
    }

    pub fn areas(&self) -> BTreeMap<u32, u64> {
        let mut out = BTreeMap::new();
        for &id in &self.ids {
            *out.entry(id).or_insert(0) += 1;
        }
        out
    }
}

/// One object: category, confidence and its visible and full-extent masks.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    pub category: ClassId,
    pub score: f64,
    pub visible: BinaryMask,
    pub amodal: BinaryMask,
}

impl InstanceAnnotation {
    pub fn new(category: ClassId, score: f64, visible: BinaryMask, amodal: BinaryMask) -> Result<Self> {
        let inst = Self {
            category,
            score,
            visible,
            amodal,
        };
        inst.validate(0)?;
        Ok(inst)
    }

    /// An unoccluded object whose visible and amodal masks coincide.
    pub fn unoccluded(category: ClassId, score: f64, mask: BinaryMask) -> Result<Self> {
        Self::new(category, score, mask.clone(), mask)
    }

    pub fn dims(&self) -> (u32, u32) {
        self.visible.dims()
    }

    /// Checks the invariants, reporting `index` on failure.
    pub fn validate(&self, index: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidScore(self.score));
        }
        if self.visible.dims() != self.amodal.dims() {
            return Err(dims_mismatch(self.amodal.dims(), self.visible.dims()));
        }
        if !self.amodal.contains(&self.visible)? {
            return Err(Error::VisibleNotInAmodal { index });
        }
        Ok(())
    }

    pub fn is_occluded(&self) -> bool {
        self.visible != self.amodal
    }
}

/// A thing segment of an amodal panoptic output with its full-extent mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AmodalSegment {
    pub id: u32,
    pub class_id: ClassId,
    pub score: f64,
    pub mask: BinaryMask,
}

/// Amodal panoptic output: the visible-pixel map plus possibly overlapping
/// full-extent thing segments in score order.
#[derive(Clone, Debug, PartialEq)]
pub struct AmodalPanoptic {
    pub map: PanopticMap,
    pub segments: Vec<AmodalSegment>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codec_examples() {
        assert_eq!(encode_segment_id(0, 0).unwrap(), 0);
        assert_eq!(encode_segment_id(13, 7).unwrap(), 13007);
        assert_eq!(decode_segment_id(13007), (13, 7));
        assert!(matches!(
            encode_segment_id(3, 1000),
            Err(Error::InstanceIndexOutOfRange(1000))
        ));
        assert_eq!(encode_segment_id(18, 999).unwrap(), 18999);
        assert!(18999 <= u16::MAX as u32);
    }

    #[test]
    fn taxonomy_split() {
        let t = Taxonomy::oass18();
        assert_eq!(t.num_classes(), 18);
        assert_eq!(t.stuff_classes().count(), 11);
        assert_eq!(t.thing_classes().count(), 7);
        assert_eq!(t.class_by_name("car"), Some(13));
        assert_eq!(t.class_by_name("pedestrians"), Some(11));
        assert_eq!(Taxonomy::cityscapes19().num_classes(), 19);
    }

    #[test]
    fn semantic_validation() {
        assert!(SemanticMap::new(1, 2, 3, vec![0, 3]).is_err());
        assert!(SemanticMap::new(1, 2, 3, vec![0, 255]).is_ok());
        assert!(SemanticMap::new(0, 2, 3, vec![]).is_err());
        assert!(SemanticMap::new(1, 2, 3, vec![0]).is_err());
    }

    #[test]
    fn panoptic_validation() {
        let seg = SegmentInfo {
            id: 13001,
            class_id: 13,
            is_thing: true,
        };
        assert!(PanopticMap::new(1, 2, vec![0, 13001], vec![seg]).is_ok());
        assert!(PanopticMap::new(1, 2, vec![0, 13002], vec![seg]).is_err());
        assert!(PanopticMap::new(1, 2, vec![0, 0], vec![seg, seg]).is_err());
        let wrong = SegmentInfo { class_id: 12, ..seg };
        assert!(PanopticMap::new(1, 2, vec![0, 0], vec![wrong]).is_err());
        let m = PanopticMap::from_ids(1, 3, vec![999, 13001, 0], &Taxonomy::oass18()).unwrap();
        assert_eq!(m.segments().len(), 2);
        assert!(!m.segment(999).unwrap().is_thing);
        assert!(m.segment(13001).unwrap().is_thing);
    }

    #[test]
    fn instance_containment() {
        let amodal = BinaryMask::from_fn(3, 3, |r, _| r < 2);
        let visible = BinaryMask::from_fn(3, 3, |r, c| r < 2 && c < 2);
        assert!(InstanceAnnotation::new(13, 0.9, visible.clone(), amodal.clone()).is_ok());
        assert!(matches!(
            InstanceAnnotation::new(13, 0.9, amodal.clone(), visible.clone()),
            Err(Error::VisibleNotInAmodal { .. })
        ));
        assert!(InstanceAnnotation::new(13, 1.5, visible, amodal).is_err());
    }
}
