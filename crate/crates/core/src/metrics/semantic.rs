use std::collections::BTreeMap;

use crate::error::Result;
use crate::labels::{ClassId, SemanticMap, IGNORE_LABEL};
use crate::metrics::ClassReport;

/// Per-class pixel counts accumulated across images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfusionCounts {
    /// class -> (tp, fp, fn)
    counts: BTreeMap<ClassId, [u64; 3]>,
}

impl ConfusionCounts {
    pub fn add(&mut self, pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
        gt.check_dims(pred.dims())?;
        let mut tp = [0u64; 256];
        let mut fp = [0u64; 256];
        let mut fn_ = [0u64; 256];
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p == g {
                tp[g as usize] += 1;
            } else {
                fn_[g as usize] += 1;
                if p != IGNORE_LABEL {
                    fp[p as usize] += 1;
                }
            }
        }
        for c in 0..IGNORE_LABEL as usize {
            if tp[c] + fp[c] + fn_[c] > 0 {
                let e = self.counts.entry(c as ClassId).or_default();
                e[0] += tp[c];
                e[1] += fp[c];
                e[2] += fn_[c];
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (&c, v) in &other.counts {
            let e = self.counts.entry(c).or_default();
            for k in 0..3 {
                e[k] += v[k];
            }
        }
    }

    pub fn report(&self) -> ClassReport {
        ClassReport::from_values(
            self.counts
                .iter()
                .map(|(&c, &[tp, fp, fn_])| (c, tp as f64 / (tp + fp + fn_) as f64)),
        )
    }
}

/// Per-class IoU `TP / (TP + FP + FN)` over pixels; ground-truth ignore
/// pixels are excluded. Classes absent from both maps are not evaluated.
pub fn semantic_iou(pred: &SemanticMap, gt: &SemanticMap) -> Result<ClassReport> {
    let mut acc = ConfusionCounts::default();
    acc.add(pred, gt)?;
    Ok(acc.report())
}
