//! The five benchmark metrics: semantic IoU, AP, amodal AP, PQ and amodal PQ.

mod ap;
mod matching;
mod panoptic;
mod semantic;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::OassOutputs;
use crate::labels::ClassId;

pub use ap::{average_precision, iou_thresholds, ApAccumulator, NUM_THRESHOLDS};
pub use matching::{
    bruteforce_match_oracle, match_by_iou, match_segments, MaskSelector, MatchPair, Matching, MATCH_IOU,
    ORACLE_MAX_SEGMENTS,
};
pub use panoptic::{amodal_panoptic_quality, panoptic_quality, PqAccumulator, PqStats};
pub use semantic::{semantic_iou, ConfusionCounts};

/// Per-class values and their arithmetic mean. An empty report (no class
/// evaluated) has mean 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: BTreeMap<ClassId, f64>,
    pub mean: f64,
}

impl ClassReport {
    pub fn from_values(values: impl IntoIterator<Item = (ClassId, f64)>) -> Self {
        let per_class: BTreeMap<ClassId, f64> = values.into_iter().collect();
        let mean = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        Self { per_class, mean }
    }

    pub fn no_classes_evaluated(&self) -> bool {
        self.per_class.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClassReports {
    pub iou: BTreeMap<ClassId, f64>,
    pub ap: BTreeMap<ClassId, f64>,
    pub aap: BTreeMap<ClassId, f64>,
    pub pq: BTreeMap<ClassId, f64>,
    pub apq: BTreeMap<ClassId, f64>,
}

/// Dataset-level summary of all five metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OassReport {
    pub miou: f64,
    pub map: f64,
    pub maap: f64,
    pub mpq: f64,
    pub mapq: f64,
    pub per_class: PerClassReports,
}

impl OassReport {
    fn from_reports(iou: ClassReport, ap: ClassReport, aap: ClassReport, pq: ClassReport, apq: ClassReport) -> Self {
        Self {
            miou: iou.mean,
            map: ap.mean,
            maap: aap.mean,
            mpq: pq.mean,
            mapq: apq.mean,
            per_class: PerClassReports {
                iou: iou.per_class,
                ap: ap.per_class,
                aap: aap.per_class,
                pq: pq.per_class,
                apq: apq.per_class,
            },
        }
    }

    /// `(name, value)` of the five headline metrics in reporting order.
    pub fn headline(&self) -> [(&'static str, f64); 5] {
        [
            ("mIoU", self.miou),
            ("mAP", self.map),
            ("mAAP", self.maap),
            ("mPQ", self.mpq),
            ("mAPQ", self.mapq),
        ]
    }

    /// Fixed-width table with four decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.headline() {
            out.push_str(&format!("{name:<6} {v:.4}\n"));
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
struct ImageStats {
    confusion: ConfusionCounts,
    ap: ApAccumulator,
    aap: ApAccumulator,
    pq: PqAccumulator,
    apq: PqAccumulator,
}

fn image_stats(index: usize, pred: &OassOutputs, gt: &OassOutputs) -> Result<ImageStats> {
    let mut s = ImageStats::default();
    s.confusion.add(&pred.semantic, &gt.semantic)?;
    s.ap.add_image(index, &pred.instances, &gt.instances, MaskSelector::Visible)?;
    s.aap.add_image(
        index,
        &pred.amodal_instances,
        &gt.amodal_instances,
        MaskSelector::Amodal,
    )?;
    s.pq.add_maps(&pred.panoptic, &gt.panoptic, None)?;
    panoptic::check_amodal_table(&pred.amodal_panoptic)?;
    panoptic::check_amodal_table(&gt.amodal_panoptic)?;
    s.apq.add_amodal(&pred.amodal_panoptic, &gt.amodal_panoptic)?;
    Ok(s)
}

/// Evaluates aligned prediction and ground-truth bundles keyed by image id.
///
/// Images are processed in parallel on the current rayon pool; the
/// per-image statistics are reduced in ground-truth order so the report is
/// bit-identical for any thread count. Semantic confusion and PQ/APQ counts
/// accumulate over the dataset, and AP pools detections per class.
pub fn evaluate_oass(preds: &[(String, OassOutputs)], gts: &[(String, OassOutputs)]) -> Result<OassReport> {
    let by_id: HashMap<&str, &OassOutputs> = preds.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let mut pairs = Vec::with_capacity(gts.len());
    for (id, gt) in gts {
        let pred = by_id.get(id.as_str()).ok_or_else(|| Error::MissingPair(id.clone()))?;
        pairs.push((*pred, gt));
    }
    if preds.len() != gts.len() {
        let gt_ids: std::collections::HashSet<&str> = gts.iter().map(|(k, _)| k.as_str()).collect();
        if let Some((extra, _)) = preds.iter().find(|(k, _)| !gt_ids.contains(k.as_str())) {
            return Err(Error::MissingPair(extra.clone()));
        }
    }

    let stats: Vec<ImageStats> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (pred, gt))| image_stats(i, pred, gt))
        .collect::<Result<_>>()?;

    let mut total = ImageStats::default();
    for s in &stats {
        total.confusion.merge(&s.confusion);
        total.ap.merge(&s.ap);
        total.aap.merge(&s.aap);
        total.pq.merge(&s.pq);
        total.apq.merge(&s.apq);
    }
    Ok(OassReport::from_reports(
        total.confusion.report(),
        total.ap.report(),
        total.aap.report(),
        total.pq.report(),
        total.apq.report(),
    ))
}
