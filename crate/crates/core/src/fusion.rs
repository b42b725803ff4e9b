//! Occlusion-aware fusion of the semantic, instance and amodal-instance
//! branch outputs into the five segmentation outputs.
//!
//! Instance branches are class-agnostic; each mask takes its class by a
//! majority vote over the semantic prediction. For amodal masks the vote
//! only looks at pixels no other amodal mask covers, so an object that is
//! mostly hidden behind another is not swallowed by the occluder's class.

use crate::error::{Error, Result};
use crate::labels::{
    encode_segment_id, AmodalPanoptic, AmodalSegment, ClassId, InstanceAnnotation, PanopticMap, SegmentInfo,
    SemanticMap, Taxonomy, IGNORE_LABEL, STUFF_INSTANCE_INDEX, VOID_ID,
};
use crate::mask::BinaryMask;

/// Instance confidence threshold applied at inference.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.95;

/// Raw branch predictions for one image. Categories on the instance lists
/// are ignored; they are assigned by voting.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    pub semantic: SemanticMap,
    pub instances: Vec<InstanceAnnotation>,
    pub amodal_instances: Vec<InstanceAnnotation>,
}

/// The five outputs for one image. Also used for ground truth bundles.
#[derive(Clone, Debug, PartialEq)]
pub struct OassOutputs {
    pub semantic: SemanticMap,
    pub instances: Vec<InstanceAnnotation>,
    pub amodal_instances: Vec<InstanceAnnotation>,
    pub panoptic: PanopticMap,
    pub amodal_panoptic: AmodalPanoptic,
}

fn thing_votes(mask: &BinaryMask, semantic: &SemanticMap, taxonomy: &Taxonomy) -> [u64; 256] {
    let mut counts = [0u64; 256];
    mask.for_each_pixel(|r, c| {
        let l = semantic.get(r, c);
        if l != IGNORE_LABEL && taxonomy.is_thing(l as ClassId) {
            counts[l as usize] += 1;
        }
    });
    counts
}

fn argmax_lowest(counts: &[u64; 256]) -> Option<ClassId> {
    let mut best: Option<(usize, u64)> = None;
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && best.is_none_or(|(_, b)| n > b) {
            best = Some((c, n));
        }
    }
    best.map(|(c, _)| c as ClassId)
}

/// Plain majority vote of thing labels over the whole mask, without any
/// fallback. This is the conventional panoptic rule.
pub fn majority_thing_class(mask: &BinaryMask, semantic: &SemanticMap, taxonomy: &Taxonomy) -> Result<Option<ClassId>> {
    semantic.check_dims(mask.dims())?;
    Ok(argmax_lowest(&thing_votes(mask, semantic, taxonomy)))
}

/// Pixels 8-adjacent to the mask but outside it.
fn dilation_ring(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let dense = mask.decode();
    let at = |r: i64, c: i64| -> bool {
        r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && dense[r as usize * w as usize + c as usize] != 0
    };
    BinaryMask::from_fn(h, w, |r, c| {
        let (r, c) = (r as i64, c as i64);
        if at(r, c) {
            return false;
        }
        (-1..=1).any(|dr| (-1..=1).any(|dc| at(r + dr, c + dc)))
    })
}

/// Thing class most frequent under the mask (ties to the lowest id). A mask
/// covering only stuff falls back to the most frequent thing class in its
/// one-pixel dilation ring; `None` means the instance should be dropped.
pub fn vote_instance_class(mask: &BinaryMask, semantic: &SemanticMap, taxonomy: &Taxonomy) -> Result<Option<ClassId>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if let Some(c) = majority_thing_class(mask, semantic, taxonomy)? {
        return Ok(Some(c));
    }
    Ok(argmax_lowest(&thing_votes(&dilation_ring(mask), semantic, taxonomy)))
}

/// Vote restricted to the part of `target` not covered by any of `others`.
/// When that part is empty (or yields no class) the whole target votes.
pub fn vote_amodal_class(
    target: &BinaryMask,
    others: &[&BinaryMask],
    semantic: &SemanticMap,
    taxonomy: &Taxonomy,
) -> Result<Option<ClassId>> {
    if target.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut exclusive = target.clone();
    for o in others {
        exclusive = exclusive.difference(o)?;
    }
    if !exclusive.is_empty() {
        if let Some(c) = vote_instance_class(&exclusive, semantic, taxonomy)? {
            return Ok(Some(c));
        }
    }
    vote_instance_class(target, semantic, taxonomy)
}

/// Paste order: descending score, then mask digest, then input position.
fn paste_order(instances: &[InstanceAnnotation]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .score
            .total_cmp(&instances[a].score)
            .then(instances[a].visible.digest().cmp(&instances[b].visible.digest()))
            .then(instances[a].amodal.digest().cmp(&instances[b].amodal.digest()))
            .then(a.cmp(&b))
    });
    order
}

struct Pasted {
    ids: Vec<u32>,
    /// (input index, segment id, claimed pixel count) in paste order
    placed: Vec<(usize, u32, u64)>,
}

fn paste(semantic: &SemanticMap, instances: &[InstanceAnnotation], taxonomy: &Taxonomy) -> Result<Pasted> {
    let (h, w) = semantic.dims();
    let width = w as usize;
    let mut ids = vec![VOID_ID; h as usize * width];
    let mut next_index = vec![0u32; 256];
    let mut placed = Vec::with_capacity(instances.len());
    for idx in paste_order(instances) {
        let inst = &instances[idx];
        semantic.check_dims(inst.dims())?;
        if !taxonomy.is_thing(inst.category) {
            return Err(Error::Config(format!(
                "instance {idx} has non-thing class {}",
                inst.category
            )));
        }
        let slot = &mut next_index[inst.category as usize];
        if *slot >= STUFF_INSTANCE_INDEX {
            return Err(Error::InstanceIndexOutOfRange(*slot));
        }
        let id = encode_segment_id(inst.category, *slot)?;
        *slot += 1;
        let mut claimed = 0u64;
        inst.visible.for_each_pixel(|r, c| {
            let p = &mut ids[r as usize * width + c as usize];
            if *p == VOID_ID {
                *p = id;
                claimed += 1;
            }
        });
        placed.push((idx, id, claimed));
    }
    for (p, &l) in ids.iter_mut().zip(semantic.labels()) {
        if *p == VOID_ID && l != IGNORE_LABEL && !taxonomy.is_thing(l as ClassId) {
            *p = encode_segment_id(l as ClassId, STUFF_INSTANCE_INDEX)?;
        }
    }
    Ok(Pasted { ids, placed })
}

fn build_map(semantic: &SemanticMap, ids: Vec<u32>, things: &[(u32, ClassId)]) -> Result<PanopticMap> {
    let mut segments: Vec<SegmentInfo> = things
        .iter()
        .map(|&(id, class_id)| SegmentInfo {
            id,
            class_id,
            is_thing: true,
        })
        .collect();
    let mut stuff_seen = [false; 256];
    for &l in semantic.labels() {
        stuff_seen[l as usize] = true;
    }
    for (l, &seen) in stuff_seen.iter().enumerate() {
        if !seen {
            continue;
        }
        let id = encode_segment_id(l as ClassId, STUFF_INSTANCE_INDEX)?;
        if ids.contains(&id) {
            segments.push(SegmentInfo {
                id,
                class_id: l as ClassId,
                is_thing: false,
            });
        }
    }
    PanopticMap::new(semantic.height(), semantic.width(), ids, segments)
}

/// Pastes class-labeled instances by descending score onto the semantic
/// stuff background. Each instance claims its visible pixels not already
/// taken; instances left with no pixels are dropped. Thing-labeled
/// semantic pixels that no instance claims become void.
pub fn fuse_panoptic(
    semantic: &SemanticMap,
    instances: &[InstanceAnnotation],
    taxonomy: &Taxonomy,
) -> Result<PanopticMap> {
    let pasted = paste(semantic, instances, taxonomy)?;
    let things: Vec<(u32, ClassId)> = pasted
        .placed
        .iter()
        .filter(|(_, _, n)| *n > 0)
        .map(|&(idx, id, _)| (id, instances[idx].category))
        .collect();
    build_map(semantic, pasted.ids, &things)
}

/// Same pixel map as [`fuse_panoptic`] on the visible masks, plus every
/// instance's full-extent mask in paste order. Instances hidden entirely in
/// the pixel map keep their amodal segment.
pub fn fuse_amodal_panoptic(
    semantic: &SemanticMap,
    amodal_instances: &[InstanceAnnotation],
    taxonomy: &Taxonomy,
) -> Result<AmodalPanoptic> {
    let pasted = paste(semantic, amodal_instances, taxonomy)?;
    let things: Vec<(u32, ClassId)> = pasted
        .placed
        .iter()
        .filter(|(_, _, n)| *n > 0)
        .map(|&(idx, id, _)| (id, amodal_instances[idx].category))
        .collect();
    let segments = pasted
        .placed
        .iter()
        .map(|&(idx, id, _)| {
            let inst = &amodal_instances[idx];
            AmodalSegment {
                id,
                class_id: inst.category,
                score: inst.score,
                mask: inst.amodal.clone(),
            }
        })
        .collect();
    Ok(AmodalPanoptic {
        map: build_map(semantic, pasted.ids, &things)?,
        segments,
    })
}

/// Filters both instance lists by score, assigns classes with the two
/// voting rules and builds all five outputs.
pub fn run_oafusion(branches: &BranchOutputs, score_threshold: f64, taxonomy: &Taxonomy) -> Result<OassOutputs> {
    if !(0.0..=1.0).contains(&score_threshold) {
        return Err(Error::Config(format!(
            "score threshold {score_threshold} outside [0, 1]"
        )));
    }
    let semantic = &branches.semantic;
    for (i, inst) in branches.instances.iter().chain(&branches.amodal_instances).enumerate() {
        semantic.check_dims(inst.dims())?;
        inst.validate(i)?;
    }

    let mut instances = Vec::new();
    for inst in branches.instances.iter().filter(|i| i.score >= score_threshold) {
        if inst.visible.is_empty() {
            continue;
        }
        if let Some(category) = vote_instance_class(&inst.visible, semantic, taxonomy)? {
            instances.push(InstanceAnnotation {
                category,
                ..inst.clone()
            });
        }
    }

    let kept: Vec<&InstanceAnnotation> = branches
        .amodal_instances
        .iter()
        .filter(|i| i.score >= score_threshold && !i.amodal.is_empty())
        .collect();
    let mut amodal_instances = Vec::new();
    for (k, inst) in kept.iter().enumerate() {
        let others: Vec<&BinaryMask> = kept
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, o)| &o.amodal)
            .collect();
        if let Some(category) = vote_amodal_class(&inst.amodal, &others, semantic, taxonomy)? {
            amodal_instances.push(InstanceAnnotation {
                category,
                ..(*inst).clone()
            });
        }
    }

    let panoptic = fuse_panoptic(semantic, &instances, taxonomy)?;
    let amodal_panoptic = fuse_amodal_panoptic(semantic, &amodal_instances, taxonomy)?;
    Ok(OassOutputs {
        semantic: semantic.clone(),
        instances,
        amodal_instances,
        panoptic,
        amodal_panoptic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAR: u8 = 13;
    const PED: u8 = 11;
    const ROAD: u8 = 0;

    fn tax() -> Taxonomy {
        Taxonomy::oass18()
    }

    fn strip(labels: &[u8]) -> SemanticMap {
        SemanticMap::new(1, labels.len() as u32, 18, labels.to_vec()).unwrap()
    }

    fn cols(w: u32, a: u32, b: u32) -> BinaryMask {
        BinaryMask::from_fn(1, w, |_, c| c >= a && c < b)
    }

    #[test]
    fn uniform_vote() {
        let sem = strip(&[CAR; 5]);
        assert_eq!(vote_instance_class(&cols(5, 0, 5), &sem, &tax()).unwrap(), Some(13));
    }

    #[test]
    fn majority_vote_six_four() {
        let mut labels = vec![CAR; 6];
        labels.extend([PED; 4]);
        let sem = strip(&labels);
        assert_eq!(vote_instance_class(&cols(10, 0, 10), &sem, &tax()).unwrap(), Some(13));
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        let sem = strip(&[CAR, CAR, PED, PED]);
        assert_eq!(vote_instance_class(&cols(4, 0, 4), &sem, &tax()).unwrap(), Some(11));
    }

    #[test]
    fn stuff_only_falls_back_to_ring() {
        // mask over road px 2..4, car just right of it
        let sem = strip(&[ROAD, ROAD, ROAD, ROAD, CAR, ROAD]);
        assert_eq!(vote_instance_class(&cols(6, 2, 4), &sem, &tax()).unwrap(), Some(13));
        let sem = strip(&[ROAD, ROAD, ROAD, ROAD, ROAD, CAR]);
        assert_eq!(vote_instance_class(&cols(6, 1, 3), &sem, &tax()).unwrap(), None);
        assert!(matches!(
            vote_instance_class(&BinaryMask::empty(1, 6), &sem, &tax()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn amodal_vote_ignores_overlap() {
        // pedestrian amodal px 0..10, car occludes px 4..10 (60%).
        let mut labels = vec![PED; 4];
        labels.extend([CAR; 8]);
        let sem = strip(&labels);
        let ped = cols(12, 0, 10);
        let car = cols(12, 4, 12);
        assert_eq!(majority_thing_class(&ped, &sem, &tax()).unwrap(), Some(13));
        assert_eq!(vote_amodal_class(&ped, &[&car], &sem, &tax()).unwrap(), Some(11));
        // with no others it reduces to the instance vote
        assert_eq!(
            vote_amodal_class(&ped, &[], &sem, &tax()).unwrap(),
            vote_instance_class(&ped, &sem, &tax()).unwrap()
        );
    }

    #[test]
    fn fully_covered_target_uses_whole_mask() {
        let sem = strip(&[PED, CAR, CAR, CAR]);
        let target = cols(4, 0, 3);
        let cover = cols(4, 0, 4);
        assert_eq!(vote_amodal_class(&target, &[&cover], &sem, &tax()).unwrap(), Some(13));
    }

    #[test]
    fn stuff_only_panoptic() {
        let sem = strip(&[ROAD, ROAD, 10, 10, 2]);
        let p = fuse_panoptic(&sem, &[], &tax()).unwrap();
        assert_eq!(p.segments().len(), 3);
        assert!(p.segments().iter().all(|s| !s.is_thing));
        assert_eq!(p.get(0, 0), 999);
    }

    #[test]
    fn higher_score_keeps_contested_pixels() {
        let sem = strip(&[CAR; 6]);
        let a = InstanceAnnotation::unoccluded(13, 0.8, cols(6, 0, 4)).unwrap();
        let b = InstanceAnnotation::unoccluded(13, 0.9, cols(6, 2, 6)).unwrap();
        let p = fuse_panoptic(&sem, &[a.clone(), b.clone()], &tax()).unwrap();
        // b pasted first -> index 0
        assert_eq!(p.ids(), &[13001, 13001, 13000, 13000, 13000, 13000]);
        let q = fuse_panoptic(&sem, &[b, a], &tax()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn covered_instance_dropped() {
        let sem = strip(&[CAR; 6]);
        let a = InstanceAnnotation::unoccluded(13, 0.9, cols(6, 0, 6)).unwrap();
        let b = InstanceAnnotation::unoccluded(13, 0.5, cols(6, 1, 3)).unwrap();
        let p = fuse_panoptic(&sem, &[a, b], &tax()).unwrap();
        assert_eq!(p.segments().len(), 1);
    }

    #[test]
    fn unclaimed_thing_pixels_are_void() {
        let sem = strip(&[CAR, CAR, ROAD]);
        let p = fuse_panoptic(&sem, &[], &tax()).unwrap();
        assert_eq!(p.ids(), &[0, 0, 999]);
    }

    #[test]
    fn occluded_pedestrian_amodal_extends_under_car() {
        let mut labels = vec![PED; 4];
        labels.extend([CAR; 8]);
        let sem = strip(&labels);
        let ped = InstanceAnnotation::new(11, 0.96, cols(12, 0, 4), cols(12, 0, 10)).unwrap();
        let car = InstanceAnnotation::unoccluded(13, 0.99, cols(12, 4, 12)).unwrap();
        let ap = fuse_amodal_panoptic(&sem, &[ped, car], &tax()).unwrap();
        assert_eq!(ap.segments.len(), 2);
        let ped_seg = ap.segments.iter().find(|s| s.class_id == 11).unwrap();
        assert_eq!(ped_seg.mask.area(), 10);
        assert_eq!(ap.map.get(0, 6), 13000);
    }

    #[test]
    fn empty_branches_pass_semantic_through() {
        let sem = strip(&[ROAD, 10]);
        let b = BranchOutputs {
            semantic: sem.clone(),
            instances: vec![],
            amodal_instances: vec![],
        };
        let out = run_oafusion(&b, DEFAULT_SCORE_THRESHOLD, &tax()).unwrap();
        assert_eq!(out.semantic, sem);
        assert!(out.instances.is_empty() && out.amodal_instances.is_empty());
        assert!(out.amodal_panoptic.segments.is_empty());
    }

    #[test]
    fn threshold_filters_and_unoccluded_outputs_agree() {
        let sem = strip(&[ROAD, CAR, CAR, ROAD]);
        let car = InstanceAnnotation::unoccluded(0, 0.97, cols(4, 1, 3)).unwrap();
        let weak = InstanceAnnotation::unoccluded(0, 0.5, cols(4, 0, 1)).unwrap();
        let b = BranchOutputs {
            semantic: sem,
            instances: vec![car.clone(), weak.clone()],
            amodal_instances: vec![car, weak],
        };
        let out = run_oafusion(&b, DEFAULT_SCORE_THRESHOLD, &tax()).unwrap();
        assert_eq!(out.instances.len(), 1);
        assert_eq!(out.instances[0].category, 13);
        assert_eq!(out.instances, out.amodal_instances);
        assert_eq!(out.panoptic, out.amodal_panoptic.map);
        assert!(run_oafusion(&b, 1.5, &tax()).is_err());
    }
}
