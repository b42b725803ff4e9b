//! Mask average precision over ten IoU thresholds (0.50:0.05:0.95) with
//! 101-point interpolated precision, pooled across images per class.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::labels::{ClassId, InstanceAnnotation};
use crate::mask::mask_iou;
use crate::metrics::matching::MaskSelector;
use crate::metrics::ClassReport;

pub const NUM_THRESHOLDS: usize = 10;
const RECALL_POINTS: usize = 101;

/// 0.50, 0.55, ..., 0.95, built from exact twentieths.
pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|i| (10 + i) as f64 / 20.0)
}

#[derive(Clone, Debug, PartialEq)]
struct DetRecord {
    score: f64,
    image: usize,
    index: usize,
    matched: [bool; NUM_THRESHOLDS],
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ClassDets {
    num_gt: u64,
    dets: Vec<DetRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApAccumulator {
    per_class: BTreeMap<ClassId, ClassDets>,
}

impl ApAccumulator {
    /// Matches one image's detections greedily in descending score order:
    /// each takes the still-unmatched ground truth of highest IoU at or
    /// above the threshold.
    pub fn add_image(
        &mut self,
        image: usize,
        dets: &[InstanceAnnotation],
        gts: &[InstanceAnnotation],
        selector: MaskSelector,
    ) -> Result<()> {
        let thresholds = iou_thresholds();
        let mut classes: BTreeMap<ClassId, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, d) in dets.iter().enumerate() {
            classes.entry(d.category).or_default().0.push(i);
        }
        for (i, g) in gts.iter().enumerate() {
            classes.entry(g.category).or_default().1.push(i);
        }
        for (class, (mut d_idx, g_idx)) in classes {
            d_idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
            let ious: Vec<Vec<f64>> = d_idx
                .iter()
                .map(|&d| {
                    g_idx
                        .iter()
                        .map(|&g| mask_iou(selector.pick(&dets[d]), selector.pick(&gts[g])))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;

            let entry = self.per_class.entry(class).or_default();
            entry.num_gt += g_idx.len() as u64;
            let mut records: Vec<DetRecord> = d_idx
                .iter()
                .map(|&d| DetRecord {
                    score: dets[d].score,
                    image,
                    index: d,
                    matched: [false; NUM_THRESHOLDS],
                })
                .collect();
            for (t, &thr) in thresholds.iter().enumerate() {
                let mut taken = vec![false; g_idx.len()];
                for (k, row) in ious.iter().enumerate() {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, &iou) in row.iter().enumerate() {
                        if taken[j] || iou < thr {
                            continue;
                        }
                        if best.is_none_or(|(_, b)| iou > b) {
                            best = Some((j, iou));
                        }
                    }
                    if let Some((j, _)) = best {
                        taken[j] = true;
                        records[k].matched[t] = true;
                    }
                }
            }
            entry.dets.extend(records);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ApAccumulator) {
        for (&c, v) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.num_gt += v.num_gt;
            e.dets.extend(v.dets.iter().cloned());
        }
    }

    /// AP per class with at least one ground truth.
    pub fn report(&self) -> ClassReport {
        ClassReport::from_values(
            self.per_class
                .iter()
                .filter(|(_, v)| v.num_gt > 0)
                .map(|(&c, v)| (c, class_ap(v))),
        )
    }
}

fn class_ap(v: &ClassDets) -> f64 {
    let mut order: Vec<&DetRecord> = v.dets.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.index.cmp(&b.index))
    });
    let num_gt = v.num_gt as f64;
    let mut total = 0.0;
    for t in 0..NUM_THRESHOLDS {
        let mut recall = Vec::with_capacity(order.len());
        let mut precision = Vec::with_capacity(order.len());
        let (mut tp, mut fp) = (0.0f64, 0.0f64);
        for d in &order {
            if d.matched[t] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            recall.push(tp / num_gt);
            precision.push(tp / (tp + fp));
        }
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut sum = 0.0;
        let mut ptr = 0;
        for r in 0..RECALL_POINTS {
            let level = r as f64 / (RECALL_POINTS - 1) as f64;
            while ptr < recall.len() && recall[ptr] < level {
                ptr += 1;
            }
            if ptr < recall.len() {
                sum += precision[ptr];
            }
        }
        total += sum / RECALL_POINTS as f64;
    }
    total / NUM_THRESHOLDS as f64
}

/// AP (visible masks) or AAP (amodal masks) for a single image.
pub fn average_precision(
    dets: &[InstanceAnnotation],
    gts: &[InstanceAnnotation],
    selector: MaskSelector,
) -> Result<ClassReport> {
    let mut acc = ApAccumulator::default();
    acc.add_image(0, dets, gts, selector)?;
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;

    fn inst(class: ClassId, score: f64, r0: u32, r1: u32) -> InstanceAnnotation {
        let m = BinaryMask::from_fn(20, 1, |r, _| r >= r0 && r < r1);
        InstanceAnnotation::unoccluded(class, score, m).unwrap()
    }

    #[test]
    fn thresholds_are_exact() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![inst(13, 1.0, 0, 4), inst(13, 1.0, 6, 9), inst(11, 1.0, 12, 20)];
        let dets = vec![inst(13, 0.2, 6, 9), inst(13, 0.7, 0, 4), inst(11, 0.1, 12, 20)];
        let r = average_precision(&dets, &gts, MaskSelector::Visible).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn iou_three_quarters() {
        let gts = vec![inst(13, 1.0, 0, 4)];
        let dets = vec![inst(13, 0.9, 0, 3)];
        let r = average_precision(&dets, &gts, MaskSelector::Visible).unwrap();
        assert_eq!(r.per_class[&13], 0.6);
    }

    #[test]
    fn no_detections() {
        let gts = vec![inst(13, 1.0, 0, 4)];
        let r = average_precision(&[], &gts, MaskSelector::Visible).unwrap();
        assert_eq!(r.per_class[&13], 0.0);
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn detection_without_gt_class_is_not_evaluated() {
        let gts = vec![inst(13, 1.0, 0, 4)];
        let dets = vec![inst(13, 0.9, 0, 4), inst(12, 0.9, 5, 8)];
        let r = average_precision(&dets, &gts, MaskSelector::Visible).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn higher_scored_false_positive_halves_precision() {
        // A higher-scored FP ahead of the TP drops precision to 1/2.
        let gts = vec![inst(13, 1.0, 0, 4)];
        let dets = vec![inst(13, 0.5, 0, 4), inst(13, 0.9, 10, 14)];
        let r = average_precision(&dets, &gts, MaskSelector::Visible).unwrap();
        assert_eq!(r.per_class[&13], 0.5);
    }
}
