//! Panoptic quality and its amodal variant.
//!
//! Visible-segment IoU is computed from a joint histogram of the two id
//! maps. Pixels that are void in the ground truth are left out of the
//! prediction's area, and an unmatched prediction lying mostly on
//! ground-truth void is not counted as a false positive.

use std::collections::{BTreeMap, HashMap};

use crate::error::{dims_mismatch, Error, Result};
use crate::labels::{AmodalPanoptic, ClassId, PanopticMap, VOID_ID};
use crate::mask::mask_iou;
use crate::metrics::matching::{match_by_iou, MatchPair, Matching, MATCH_IOU};
use crate::metrics::ClassReport;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PqStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PqStats {
    pub fn pq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.iou_sum / denom
        }
    }
}

/// TP/FP/FN and IoU sums per class, accumulated across images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqAccumulator {
    pub per_class: BTreeMap<ClassId, PqStats>,
}

impl PqAccumulator {
    pub fn merge(&mut self, other: &PqAccumulator) {
        for (&c, s) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
            e.iou_sum += s.iou_sum;
        }
    }

    fn record(&mut self, class: ClassId, m: &Matching, ignored_fp: usize) {
        let e = self.per_class.entry(class).or_default();
        e.tp += m.pairs.len() as u64;
        e.fp += (m.false_positives.len() - ignored_fp) as u64;
        e.fn_ += m.false_negatives.len() as u64;
        e.iou_sum += m.iou_sum();
    }

    /// Per-class PQ over classes with at least one segment on either side.
    pub fn report(&self) -> ClassReport {
        ClassReport::from_values(
            self.per_class
                .iter()
                .filter(|(_, s)| s.tp + s.fp + s.fn_ > 0)
                .map(|(&c, s)| (c, s.pq())),
        )
    }

    /// Accumulates one image. `keep` selects which segments participate by
    /// their thing flag (`None` keeps all).
    pub fn add_maps(&mut self, pred: &PanopticMap, gt: &PanopticMap, keep: Option<bool>) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(dims_mismatch(gt.dims(), pred.dims()));
        }
        let mut gt_area: HashMap<u32, u64> = HashMap::new();
        let mut pred_area: HashMap<u32, u64> = HashMap::new();
        let mut pred_nonvoid: HashMap<u32, u64> = HashMap::new();
        let mut inter: HashMap<(u32, u32), u64> = HashMap::new();

        let mut flush = |p: u32, g: u32, n: u64| {
            *gt_area.entry(g).or_insert(0) += n;
            *pred_area.entry(p).or_insert(0) += n;
            if g != VOID_ID {
                *pred_nonvoid.entry(p).or_insert(0) += n;
            }
            *inter.entry((p, g)).or_insert(0) += n;
        };
        let (pids, gids) = (pred.ids(), gt.ids());
        let mut run = (pids[0], gids[0], 0u64);
        for (&p, &g) in pids.iter().zip(gids) {
            if (p, g) == (run.0, run.1) {
                run.2 += 1;
            } else {
                flush(run.0, run.1, run.2);
                run = (p, g, 1);
            }
        }
        flush(run.0, run.1, run.2);

        let wanted = |thing: bool| keep.is_none_or(|k| k == thing);
        let mut classes: BTreeMap<ClassId, (Vec<u32>, Vec<u32>)> = BTreeMap::new();
        for s in pred.segments() {
            if wanted(s.is_thing) && pred_area.contains_key(&s.id) {
                classes.entry(s.class_id).or_default().0.push(s.id);
            }
        }
        for s in gt.segments() {
            if wanted(s.is_thing) && gt_area.contains_key(&s.id) {
                classes.entry(s.class_id).or_default().1.push(s.id);
            }
        }

        for (class, (p_ids, g_ids)) in classes {
            let mut candidates = Vec::new();
            for (pi, p) in p_ids.iter().enumerate() {
                for (gi, g) in g_ids.iter().enumerate() {
                    let Some(&i) = inter.get(&(*p, *g)) else {
                        continue;
                    };
                    let union = pred_nonvoid.get(p).copied().unwrap_or(0) + gt_area[g] - i;
                    let iou = i as f64 / union as f64;
                    if iou > MATCH_IOU {
                        candidates.push(MatchPair { pred: pi, gt: gi, iou });
                    }
                }
            }
            let m = match_by_iou(p_ids.len(), g_ids.len(), &candidates);
            let ignored = m
                .false_positives
                .iter()
                .filter(|&&pi| {
                    let id = p_ids[pi];
                    let void = inter.get(&(id, VOID_ID)).copied().unwrap_or(0);
                    2 * void > pred_area[&id]
                })
                .count();
            self.record(class, &m, ignored);
        }
        Ok(())
    }

    /// Accumulates one amodal panoptic image: stuff classes from the pixel
    /// maps, thing classes from pairwise IoU of the full-extent masks.
    pub fn add_amodal(&mut self, pred: &AmodalPanoptic, gt: &AmodalPanoptic) -> Result<()> {
        self.add_maps(&pred.map, &gt.map, Some(false))?;
        let mut classes: BTreeMap<ClassId, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, s) in pred.segments.iter().enumerate() {
            if s.mask.dims() != gt.map.dims() {
                return Err(dims_mismatch(gt.map.dims(), s.mask.dims()));
            }
            if !s.mask.is_empty() {
                classes.entry(s.class_id).or_default().0.push(i);
            }
        }
        for (i, s) in gt.segments.iter().enumerate() {
            if !s.mask.is_empty() {
                classes.entry(s.class_id).or_default().1.push(i);
            }
        }
        for (class, (p_idx, g_idx)) in classes {
            let mut candidates = Vec::new();
            for (pi, &p) in p_idx.iter().enumerate() {
                for (gi, &g) in g_idx.iter().enumerate() {
                    let iou = mask_iou(&pred.segments[p].mask, &gt.segments[g].mask)?;
                    if iou > MATCH_IOU {
                        candidates.push(MatchPair { pred: pi, gt: gi, iou });
                    }
                }
            }
            let m = match_by_iou(p_idx.len(), g_idx.len(), &candidates);
            self.record(class, &m, 0);
        }
        Ok(())
    }
}

/// Per-class PQ for one image pair.
pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap) -> Result<ClassReport> {
    let mut acc = PqAccumulator::default();
    acc.add_maps(pred, gt, None)?;
    Ok(acc.report())
}

/// Per-class APQ for one image pair.
pub fn amodal_panoptic_quality(pred: &AmodalPanoptic, gt: &AmodalPanoptic) -> Result<ClassReport> {
    check_amodal_table(pred)?;
    check_amodal_table(gt)?;
    let mut acc = PqAccumulator::default();
    acc.add_amodal(pred, gt)?;
    Ok(acc.report())
}

pub(crate) fn check_amodal_table(a: &AmodalPanoptic) -> Result<()> {
    for s in &a.segments {
        if a.map.segment(s.id).is_some_and(|info| info.class_id != s.class_id) {
            return Err(Error::SegmentTable(format!(
                "amodal segment {} disagrees with the map's class",
                s.id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{AmodalSegment, SegmentInfo, Taxonomy};
    use crate::mask::BinaryMask;

    fn map(ids: Vec<u32>, h: u32, w: u32) -> PanopticMap {
        PanopticMap::from_ids(h, w, ids, &Taxonomy::oass18()).unwrap()
    }

    #[test]
    fn identity_is_one() {
        let m = map(vec![999, 999, 13000, 13001, 2999, 2999], 2, 3);
        let r = panoptic_quality(&m, &m).unwrap();
        assert_eq!(r.mean, 1.0);
        assert!(r.per_class.values().all(|&v| v == 1.0));
    }

    #[test]
    fn car_covering_six_of_ten() {
        // 1x12 strip: gt car on px 0..10, road elsewhere; pred car on px 0..6
        // and road on the remainder.
        let gt_ids: Vec<u32> = (0..12).map(|i| if i < 10 { 13000 } else { 999 }).collect();
        let pred_ids: Vec<u32> = (0..12).map(|i| if i < 6 { 13000 } else { 999 }).collect();
        let r = panoptic_quality(&map(pred_ids, 1, 12), &map(gt_ids, 1, 12)).unwrap();
        assert_eq!(r.per_class[&13], 0.6);
    }

    #[test]
    fn low_iou_scores_zero() {
        // gt car 5 px, pred car 2 px inside: IoU 0.4
        let gt_ids: Vec<u32> = (0..5).map(|_| 13000).collect();
        let pred_ids: Vec<u32> = (0..5).map(|i| if i < 2 { 13000 } else { 0 }).collect();
        let pred = PanopticMap::new(
            1,
            5,
            pred_ids,
            vec![SegmentInfo {
                id: 13000,
                class_id: 13,
                is_thing: true,
            }],
        )
        .unwrap();
        let r = panoptic_quality(&pred, &map(gt_ids, 1, 5)).unwrap();
        assert_eq!(r.per_class[&13], 0.0);
    }

    #[test]
    fn void_excluded_from_union() {
        // gt: car on 4 px, void on 2 px; pred car spans all 6 px.
        let gt = map(vec![13000, 13000, 13000, 13000, 0, 0], 1, 6);
        let pred = map(vec![13000; 6], 1, 6);
        let r = panoptic_quality(&pred, &gt).unwrap();
        assert_eq!(r.per_class[&13], 1.0);
    }

    #[test]
    fn prediction_on_void_not_penalized() {
        let gt = map(vec![999, 999, 0, 0, 0], 1, 5);
        let pred = map(vec![999, 999, 13000, 13000, 13000], 1, 5);
        let r = panoptic_quality(&pred, &gt).unwrap();
        assert!(!r.per_class.contains_key(&13));
        assert_eq!(r.mean, 1.0);
    }

    fn amodal(map: PanopticMap, segs: Vec<(u32, BinaryMask)>) -> AmodalPanoptic {
        AmodalPanoptic {
            map,
            segments: segs
                .into_iter()
                .map(|(id, mask)| AmodalSegment {
                    id,
                    class_id: id / 1000,
                    score: 1.0,
                    mask,
                })
                .collect(),
        }
    }

    #[test]
    fn occluded_pedestrian() {
        // 1x14 strip: pedestrian amodal px 0..10 with px 6..10 hidden behind
        // a car on px 6..14.
        let ids: Vec<u32> = (0..14).map(|i| if i < 6 { 11000 } else { 13000 }).collect();
        let m = map(ids, 1, 14);
        let ped_full = BinaryMask::from_fn(1, 14, |_, c| c < 10);
        let ped_visible = BinaryMask::from_fn(1, 14, |_, c| c < 6);
        let car = BinaryMask::from_fn(1, 14, |_, c| c >= 6);
        let gt = amodal(m.clone(), vec![(11000, ped_full.clone()), (13000, car.clone())]);
        let partial = amodal(m.clone(), vec![(11000, ped_visible), (13000, car.clone())]);
        let r = amodal_panoptic_quality(&partial, &gt).unwrap();
        assert_eq!(r.per_class[&11], 0.6);
        let full = amodal(m, vec![(11000, ped_full), (13000, car)]);
        assert_eq!(amodal_panoptic_quality(&full, &gt).unwrap().per_class[&11], 1.0);
    }
}
