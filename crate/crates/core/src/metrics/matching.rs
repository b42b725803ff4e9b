//! Segment matching at the >0.5 IoU threshold, plus an exhaustive oracle.
//!
//! Within a set of non-overlapping segments an IoU above one half can hold
//! for at most one partner, so the threshold alone yields a unique matching.
//! Amodal segments may overlap each other, which can create competing
//! candidates; those components are resolved exactly by maximizing the sum
//! of IoU, breaking ties toward the lexicographically smallest assignment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labels::{ClassId, InstanceAnnotation};
use crate::mask::{mask_iou, BinaryMask};

/// Minimum IoU (exclusive) for a true-positive pair.
pub const MATCH_IOU: f64 = 0.5;

/// Largest per-class segment count accepted by [`bruteforce_match_oracle`].
pub const ORACLE_MAX_SEGMENTS: usize = 10;

const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSelector {
    Visible,
    Amodal,
}

impl MaskSelector {
    pub fn pick<'a>(&self, inst: &'a InstanceAnnotation) -> &'a BinaryMask {
        match self {
            MaskSelector::Visible => &inst.visible,
            MaskSelector::Amodal => &inst.amodal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Result of matching: true-positive pairs sorted by prediction index,
/// unmatched predictions (FP) and unmatched ground truths (FN).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    pub pairs: Vec<MatchPair>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

impl Matching {
    pub fn iou_sum(&self) -> f64 {
        self.pairs.iter().map(|p| p.iou).sum()
    }

    fn finish(mut pairs: Vec<MatchPair>, num_pred: usize, num_gt: usize) -> Self {
        pairs.sort_by_key(|p| p.pred);
        let mut pred_used = vec![false; num_pred];
        let mut gt_used = vec![false; num_gt];
        for p in &pairs {
            pred_used[p.pred] = true;
            gt_used[p.gt] = true;
        }
        Self {
            pairs,
            false_positives: (0..num_pred).filter(|&i| !pred_used[i]).collect(),
            false_negatives: (0..num_gt).filter(|&i| !gt_used[i]).collect(),
        }
    }
}

/// Matches `num_pred` predictions against `num_gt` ground truths given the
/// candidate IoUs. Candidates at or below [`MATCH_IOU`] are discarded.
pub fn match_by_iou(num_pred: usize, num_gt: usize, candidates: &[MatchPair]) -> Matching {
    let mut edges: Vec<MatchPair> = candidates.iter().copied().filter(|c| c.iou > MATCH_IOU).collect();
    edges.sort_by_key(|a| (a.pred, a.gt));

    let mut pred_deg = vec![0usize; num_pred];
    let mut gt_deg = vec![0usize; num_gt];
    for e in &edges {
        pred_deg[e.pred] += 1;
        gt_deg[e.gt] += 1;
    }
    if pred_deg.iter().chain(&gt_deg).all(|&d| d <= 1) {
        return Matching::finish(edges, num_pred, num_gt);
    }

    // Split the candidate graph into connected components; trivially
    // unique edges pass through, the rest are solved exactly.
    let mut parent: Vec<usize> = (0..num_pred + num_gt).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in &edges {
        let a = find(&mut parent, e.pred);
        let b = find(&mut parent, num_pred + e.gt);
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut components: BTreeMap<usize, Vec<MatchPair>> = BTreeMap::new();
    for e in &edges {
        let root = find(&mut parent, e.pred);
        components.entry(root).or_default().push(*e);
    }

    let mut pairs = Vec::new();
    for (_, comp) in components {
        if comp.len() == 1 {
            pairs.push(comp[0]);
        } else {
            pairs.extend(best_assignment(&comp));
        }
    }
    Matching::finish(pairs, num_pred, num_gt)
}

/// Exact maximum-sum assignment over a small candidate set; predictions are
/// visited in ascending order, gts ascending with "unmatched" last, and only
/// a strictly better sum replaces the incumbent.
fn best_assignment(edges: &[MatchPair]) -> Vec<MatchPair> {
    let mut preds: Vec<usize> = edges.iter().map(|e| e.pred).collect();
    preds.dedup();
    let options: Vec<Vec<MatchPair>> = preds
        .iter()
        .map(|&p| edges.iter().copied().filter(|e| e.pred == p).collect())
        .collect();

    struct Search<'a> {
        options: &'a [Vec<MatchPair>],
        used: Vec<usize>,
        current: Vec<MatchPair>,
        best: Vec<MatchPair>,
        best_sum: f64,
    }
    impl Search<'_> {
        fn run(&mut self, depth: usize, sum: f64) {
            if depth == self.options.len() {
                if sum > self.best_sum + SUM_TOLERANCE {
                    self.best_sum = sum;
                    self.best = self.current.clone();
                }
                return;
            }
            for k in 0..self.options[depth].len() {
                let e = self.options[depth][k];
                if self.used.contains(&e.gt) {
                    continue;
                }
                self.used.push(e.gt);
                self.current.push(e);
                self.run(depth + 1, sum + e.iou);
                self.current.pop();
                self.used.pop();
            }
            self.run(depth + 1, sum);
        }
    }
    let mut search = Search {
        options: &options,
        used: Vec::new(),
        current: Vec::new(),
        best: Vec::new(),
        best_sum: f64::NEG_INFINITY,
    };
    search.run(0, 0.0);
    search.best
}

fn group_by_class(items: &[InstanceAnnotation]) -> BTreeMap<ClassId, Vec<usize>> {
    let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, inst) in items.iter().enumerate() {
        out.entry(inst.category).or_default().push(i);
    }
    out
}

/// Matches predictions to ground truths of the same category on the chosen
/// masks. Indices in the result refer to the input slices.
pub fn match_segments(
    preds: &[InstanceAnnotation],
    gts: &[InstanceAnnotation],
    selector: MaskSelector,
) -> Result<Matching> {
    let pred_groups = group_by_class(preds);
    let gt_groups = group_by_class(gts);
    let mut pairs = Vec::new();
    for (class, p_idx) in &pred_groups {
        let Some(g_idx) = gt_groups.get(class) else {
            continue;
        };
        let mut candidates = Vec::new();
        for (pi, &p) in p_idx.iter().enumerate() {
            for (gi, &g) in g_idx.iter().enumerate() {
                let iou = mask_iou(selector.pick(&preds[p]), selector.pick(&gts[g]))?;
                if iou > MATCH_IOU {
                    candidates.push(MatchPair { pred: pi, gt: gi, iou });
                }
            }
        }
        let local = match_by_iou(p_idx.len(), g_idx.len(), &candidates);
        pairs.extend(local.pairs.iter().map(|m| MatchPair {
            pred: p_idx[m.pred],
            gt: g_idx[m.gt],
            iou: m.iou,
        }));
    }
    Ok(Matching::finish(pairs, preds.len(), gts.len()))
}

/// Exhaustive search over all one-to-one matchings within each class,
/// returning the IoU-sum maximal one among those whose pairs all exceed the
/// threshold. IoU is recomputed from dense grids, independent of the RLE
/// path used by [`match_segments`].
pub fn bruteforce_match_oracle(
    preds: &[InstanceAnnotation],
    gts: &[InstanceAnnotation],
    selector: MaskSelector,
) -> Result<Matching> {
    let pred_groups = group_by_class(preds);
    let gt_groups = group_by_class(gts);
    for idx in pred_groups.values().chain(gt_groups.values()) {
        if idx.len() > ORACLE_MAX_SEGMENTS {
            return Err(Error::OracleTooLarge(idx.len(), ORACLE_MAX_SEGMENTS));
        }
    }
    let dense = |inst: &InstanceAnnotation| selector.pick(inst).decode();

    let mut pairs = Vec::new();
    for (class, p_idx) in &pred_groups {
        let Some(g_idx) = gt_groups.get(class) else {
            continue;
        };
        let p_dense: Vec<Vec<u8>> = p_idx.iter().map(|&i| dense(&preds[i])).collect();
        let g_dense: Vec<Vec<u8>> = g_idx.iter().map(|&i| dense(&gts[i])).collect();
        for (a, b) in p_dense.iter().zip(&g_dense) {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch {
                    expected: format!("{} pixels", b.len()),
                    actual: format!("{} pixels", a.len()),
                });
            }
        }
        let mut iou = vec![vec![0.0f64; g_idx.len()]; p_idx.len()];
        for (i, a) in p_dense.iter().enumerate() {
            for (j, b) in g_dense.iter().enumerate() {
                let (mut inter, mut union) = (0u64, 0u64);
                for (&x, &y) in a.iter().zip(b) {
                    inter += (x & y) as u64;
                    union += (x | y) as u64;
                }
                iou[i][j] = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            }
        }

        // Depth-first over predictions; each takes any free gt (ascending)
        // or stays unmatched.
        let mut best: Vec<(usize, usize)> = Vec::new();
        let mut best_sum = f64::NEG_INFINITY;
        let mut current: Vec<(usize, usize)> = Vec::new();
        let mut used = vec![false; g_idx.len()];
        #[allow(clippy::too_many_arguments)]
        fn dfs(
            depth: usize,
            sum: f64,
            iou: &[Vec<f64>],
            used: &mut [bool],
            current: &mut Vec<(usize, usize)>,
            best: &mut Vec<(usize, usize)>,
            best_sum: &mut f64,
        ) {
            if depth == iou.len() {
                if sum > *best_sum + SUM_TOLERANCE {
                    *best_sum = sum;
                    *best = current.clone();
                }
                return;
            }
            for j in 0..used.len() {
                if used[j] || iou[depth][j] <= MATCH_IOU {
                    continue;
                }
                used[j] = true;
                current.push((depth, j));
                dfs(depth + 1, sum + iou[depth][j], iou, used, current, best, best_sum);
                current.pop();
                used[j] = false;
            }
            dfs(depth + 1, sum, iou, used, current, best, best_sum);
        }
        dfs(0, 0.0, &iou, &mut used, &mut current, &mut best, &mut best_sum);
        pairs.extend(best.into_iter().map(|(i, j)| MatchPair {
            pred: p_idx[i],
            gt: g_idx[j],
            iou: iou[i][j],
        }));
    }
    Ok(Matching::finish(pairs, preds.len(), gts.len()))
}
