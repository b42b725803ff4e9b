//! Dense brute-force evaluator for a single image pair. Every mask is
//! decoded to one byte per pixel and every assignment is searched
//! exhaustively.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{dims_mismatch, Result};
use crate::fusion::OassOutputs;
use crate::labels::{ClassId, InstanceAnnotation, PanopticMap, IGNORE_LABEL, VOID_ID};
use crate::mask::BinaryMask;
use crate::metrics::{OassReport, PerClassReports};

fn mean(m: &BTreeMap<ClassId, f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.values().sum::<f64>() / m.len() as f64
    }
}

fn dense_iou(a: &[u8], b: &[u8], exclude: Option<&[bool]>) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..a.len() {
        let (x, y) = (a[i] != 0, b[i] != 0);
        let x = x && !exclude.is_some_and(|e| e[i]);
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Largest total IoU over all one-to-one assignments that use only pairs
/// with IoU above one half. Returns `(matched count, IoU sum, matched preds)`.
fn best_assignment(iou: &[Vec<f64>]) -> (usize, f64, Vec<bool>) {
    let n_gt = iou.first().map_or(0, |r| r.len());
    fn go(
        iou: &[Vec<f64>],
        p: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut (f64, usize, Vec<Option<usize>>),
    ) {
        if p == iou.len() {
            let n = cur.iter().flatten().count();
            let s: f64 = cur.iter().enumerate().filter_map(|(i, g)| g.map(|g| iou[i][g])).sum();
            if n > best.1 || (n == best.1 && s > best.0) {
                *best = (s, n, cur.clone());
            }
            return;
        }
        cur[p] = None;
        go(iou, p + 1, used, cur, best);
        for g in 0..used.len() {
            if !used[g] && iou[p][g] > 0.5 {
                used[g] = true;
                cur[p] = Some(g);
                go(iou, p + 1, used, cur, best);
                used[g] = false;
                cur[p] = None;
            }
        }
    }
    let mut best = (0.0, 0, vec![None; iou.len()]);
    go(iou, 0, &mut vec![false; n_gt], &mut vec![None; iou.len()], &mut best);
    let matched = best.2.iter().map(Option::is_some).collect();
    (best.1, best.0, matched)
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: f64,
    fp: f64,
    fn_: f64,
    iou: f64,
}

impl Counts {
    fn value(&self) -> f64 {
        let d = self.tp + 0.5 * (self.fp + self.fn_);
        if d == 0.0 {
            0.0
        } else {
            self.iou / d
        }
    }
}

fn map_counts(pred: &PanopticMap, gt: &PanopticMap, things: Option<bool>, out: &mut BTreeMap<ClassId, Counts>) {
    let (pi, gi) = (pred.ids(), gt.ids());
    let void: Vec<bool> = gi.iter().map(|&g| g == VOID_ID).collect();
    let present = |m: &PanopticMap| -> BTreeMap<ClassId, Vec<u32>> {
        let ids: BTreeSet<u32> = m.ids().iter().copied().collect();
        let mut by_class: BTreeMap<ClassId, Vec<u32>> = BTreeMap::new();
        for s in m.segments() {
            if ids.contains(&s.id) && things.is_none_or(|t| t == s.is_thing) {
                by_class.entry(s.class_id).or_default().push(s.id);
            }
        }
        by_class
    };
    let (pc, gc) = (present(pred), present(gt));
    let classes: BTreeSet<ClassId> = pc.keys().chain(gc.keys()).copied().collect();
    let empty = Vec::new();
    for c in classes {
        let ps = pc.get(&c).unwrap_or(&empty);
        let gs = gc.get(&c).unwrap_or(&empty);
        let pd: Vec<Vec<u8>> = ps
            .iter()
            .map(|&id| pi.iter().map(|&x| (x == id) as u8).collect())
            .collect();
        let gd: Vec<Vec<u8>> = gs
            .iter()
            .map(|&id| gi.iter().map(|&x| (x == id) as u8).collect())
            .collect();
        let iou: Vec<Vec<f64>> = pd
            .iter()
            .map(|p| gd.iter().map(|g| dense_iou(p, g, Some(&void))).collect())
            .collect();
        let (n, s, matched) = best_assignment(&iou);
        let fp = pd
            .iter()
            .zip(&matched)
            .filter(|(p, &m)| {
                let area = p.iter().filter(|&&x| x != 0).count();
                let on_void = p.iter().zip(&void).filter(|(&x, &v)| x != 0 && v).count();
                !m && 2 * on_void <= area
            })
            .count();
        let e = out.entry(c).or_default();
        e.tp += n as f64;
        e.fp += fp as f64;
        e.fn_ += (gs.len() - n) as f64;
        e.iou += s;
    }
}

fn ap_dense(dets: &[InstanceAnnotation], gts: &[InstanceAnnotation], amodal: bool) -> BTreeMap<ClassId, f64> {
    let pick = |a: &InstanceAnnotation| -> Vec<u8> {
        if amodal {
            a.amodal.decode()
        } else {
            a.visible.decode()
        }
    };
    let gt_classes: BTreeSet<ClassId> = gts.iter().map(|g| g.category).collect();
    let mut out = BTreeMap::new();
    for c in gt_classes {
        let mut d: Vec<&InstanceAnnotation> = dets.iter().filter(|x| x.category == c).collect();
        d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let g: Vec<Vec<u8>> = gts.iter().filter(|x| x.category == c).map(pick).collect();
        let dd: Vec<Vec<u8>> = d.iter().map(|x| pick(x)).collect();
        let mut ap = 0.0;
        for t in 10..20 {
            let thr = t as f64 / 20.0;
            let mut used = vec![false; g.len()];
            let mut hits = Vec::new();
            for x in &dd {
                let mut best = None;
                let mut best_iou = -1.0;
                for (j, y) in g.iter().enumerate() {
                    let v = dense_iou(x, y, None);
                    if !used[j] && v >= thr && v > best_iou {
                        best = Some(j);
                        best_iou = v;
                    }
                }
                if let Some(j) = best {
                    used[j] = true;
                }
                hits.push(best.is_some());
            }
            let mut tp = 0usize;
            let mut pr: Vec<(f64, f64)> = Vec::new();
            for (k, &h) in hits.iter().enumerate() {
                tp += h as usize;
                pr.push((tp as f64 / g.len() as f64, tp as f64 / (k + 1) as f64));
            }
            let mut sum = 0.0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                sum += pr
                    .iter()
                    .filter(|(rec, _)| *rec >= level)
                    .map(|&(_, p)| p)
                    .fold(0.0, f64::max);
            }
            ap += sum / 101.0;
        }
        out.insert(c, ap / 10.0);
    }
    out
}

/// All five metrics for one image pair, computed densely.
pub fn certify(pred: &OassOutputs, gt: &OassOutputs) -> Result<OassReport> {
    if pred.semantic.dims() != gt.semantic.dims() {
        return Err(dims_mismatch(gt.semantic.dims(), pred.semantic.dims()));
    }

    let mut conf: BTreeMap<ClassId, [u64; 3]> = BTreeMap::new();
    for (&p, &g) in pred.semantic.labels().iter().zip(gt.semantic.labels()) {
        if g == IGNORE_LABEL {
            continue;
        }
        conf.entry(g as ClassId).or_default()[if p == g { 0 } else { 2 }] += 1;
        if p != g && p != IGNORE_LABEL {
            conf.entry(p as ClassId).or_default()[1] += 1;
        }
    }
    let iou: BTreeMap<ClassId, f64> = conf
        .iter()
        .map(|(&c, &[tp, fp, fn_])| (c, tp as f64 / (tp + fp + fn_) as f64))
        .collect();

    let mut pq = BTreeMap::new();
    map_counts(&pred.panoptic, &gt.panoptic, None, &mut pq);

    let mut apq = BTreeMap::new();
    map_counts(
        &pred.amodal_panoptic.map,
        &gt.amodal_panoptic.map,
        Some(false),
        &mut apq,
    );
    let dense_segments = |a: &crate::labels::AmodalPanoptic| -> BTreeMap<ClassId, Vec<Vec<u8>>> {
        let mut m: BTreeMap<ClassId, Vec<Vec<u8>>> = BTreeMap::new();
        for s in a.segments.iter().filter(|s| !BinaryMask::is_empty(&s.mask)) {
            m.entry(s.class_id).or_default().push(s.mask.decode());
        }
        m
    };
    let (ps, gs) = (
        dense_segments(&pred.amodal_panoptic),
        dense_segments(&gt.amodal_panoptic),
    );
    let classes: BTreeSet<ClassId> = ps.keys().chain(gs.keys()).copied().collect();
    for c in classes {
        let p = ps.get(&c).cloned().unwrap_or_default();
        let g = gs.get(&c).cloned().unwrap_or_default();
        let m: Vec<Vec<f64>> = p
            .iter()
            .map(|x| g.iter().map(|y| dense_iou(x, y, None)).collect())
            .collect();
        let (n, s, _) = best_assignment(&m);
        let e = apq.entry(c).or_default();
        e.tp += n as f64;
        e.fp += (p.len() - n) as f64;
        e.fn_ += (g.len() - n) as f64;
        e.iou += s;
    }

    let finish = |m: BTreeMap<ClassId, Counts>| -> BTreeMap<ClassId, f64> {
        m.into_iter()
            .filter(|(_, c)| c.tp + c.fp + c.fn_ > 0.0)
            .map(|(k, c)| (k, c.value()))
            .collect()
    };
    let pq = finish(pq);
    let apq = finish(apq);
    let ap = ap_dense(&pred.instances, &gt.instances, false);
    let aap = ap_dense(&pred.amodal_instances, &gt.amodal_instances, true);
    Ok(OassReport {
        miou: mean(&iou),
        map: mean(&ap),
        maap: mean(&aap),
        mpq: mean(&pq),
        mapq: mean(&apq),
        per_class: PerClassReports { iou, ap, aap, pq, apq },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_prefers_more_matches_then_larger_sum() {
        let iou = vec![vec![0.9, 0.6], vec![0.7, 0.0]];
        let (n, s, m) = best_assignment(&iou);
        assert_eq!(n, 2);
        assert!((s - 1.3).abs() < 1e-15);
        assert_eq!(m, vec![true, true]);
    }

    #[test]
    fn dense_iou_with_exclusion() {
        let a = [1, 1, 1, 0];
        let b = [1, 0, 0, 1];
        assert_eq!(dense_iou(&a, &b, None), 0.25);
        assert_eq!(dense_iou(&a, &b, Some(&[false, true, true, false])), 0.5);
    }
}
