//! Seeded synthetic scenes with known metric values.
//!
//! A scene is a stack of horizontal stuff bands with rectangular and
//! elliptical things painted back to front. Every object keeps a visible
//! region and a part of its amodal extent that no other object covers.
//! The prediction is the same scene with every object translated by up to
//! `perturbation` pixels. The certificate holds all five metrics computed
//! by a dense brute-force evaluator that shares no code with
//! [`crate::metrics`].

mod oracle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::OassOutputs;
use crate::labels::{
    encode_segment_id, AmodalPanoptic, AmodalSegment, ClassId, InstanceAnnotation, PanopticMap, SegmentInfo,
    SemanticMap, Taxonomy, IGNORE_LABEL, STUFF_INSTANCE_INDEX, VOID_ID,
};
use crate::mask::BinaryMask;
use crate::metrics::OassReport;

pub use oracle::certify;

const MAX_PLACEMENT_TRIES: usize = 400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: u32,
    pub width: u32,
    pub min_objects: u32,
    pub max_objects: u32,
    /// Chance that each object after the first is placed over exactly one
    /// earlier object.
    pub occlusion_prob: f64,
    /// Maximum translation, in pixels, applied to predicted objects.
    pub perturbation: u32,
    /// Chance of a void rectangle in the ground-truth background.
    pub void_prob: f64,
    pub max_per_class: u32,
    pub seed: u64,
    pub certificate: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 2,
            max_objects: 6,
            occlusion_prob: 0.5,
            perturbation: 2,
            void_prob: 0.5,
            max_per_class: 6,
            seed: 0,
            certificate: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene {}x{} too small (minimum 16x16)",
                self.height, self.width
            )));
        }
        if self.min_objects > self.max_objects || self.max_per_class == 0 {
            return Err(Error::Config("object count range is empty".into()));
        }
        for (name, p) in [("occlusion", self.occlusion_prob), ("void", self.void_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub id: String,
    pub gt: OassOutputs,
    pub pred: OassOutputs,
    pub certificate: Option<OassReport>,
    /// Index pairs `(occluder, occluded)` into the object list.
    pub occlusions: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct Object {
    class: ClassId,
    amodal: BinaryMask,
}

fn shape_mask(h: u32, w: u32, top: i64, left: i64, bh: u32, bw: u32, ellipse: bool) -> BinaryMask {
    let (cy, cx) = (top as f64 + bh as f64 / 2.0, left as f64 + bw as f64 / 2.0);
    let (ry, rx) = (bh as f64 / 2.0, bw as f64 / 2.0);
    BinaryMask::from_fn(h, w, |r, c| {
        let (r, c) = (r as i64, c as i64);
        if r < top || c < left || r >= top + bh as i64 || c >= left + bw as i64 {
            return false;
        }
        if !ellipse {
            return true;
        }
        let dy = (r as f64 + 0.5 - cy) / ry;
        let dx = (c as f64 + 0.5 - cx) / rx;
        dy * dy + dx * dx <= 1.0
    })
}

fn translate(m: &BinaryMask, dy: i64, dx: i64) -> BinaryMask {
    let (h, w) = m.dims();
    BinaryMask::from_fn(h, w, |r, c| {
        let (sr, sc) = (r as i64 - dy, c as i64 - dx);
        sr >= 0 && sc >= 0 && sr < h as i64 && sc < w as i64 && m.get(sr as u32, sc as u32)
    })
}

fn exclusive(objects: &[Object], i: usize) -> Result<BinaryMask> {
    let mut m = objects[i].amodal.clone();
    for (j, o) in objects.iter().enumerate() {
        if j != i {
            m = m.difference(&o.amodal)?;
        }
    }
    Ok(m)
}

fn random_shape<R: Rng>(spec: &SynthSpec, rng: &mut R) -> BinaryMask {
    let (h, w) = (spec.height, spec.width);
    let bh = rng.gen_range((h / 10).max(3)..=(h / 4).max(4));
    let bw = rng.gen_range((h / 10).max(3)..=(h / 3).min(w / 3).max(4));
    let top = rng.gen_range(0..=(h - bh) as i64);
    let left = rng.gen_range(0..=(w - bw) as i64);
    shape_mask(h, w, top, left, bh, bw, rng.gen_bool(0.5))
}

/// Objects back to front, plus `(occluder, occluded)` pairs.
type Placement = (Vec<Object>, Vec<(usize, usize)>);

fn place_objects<R: Rng>(spec: &SynthSpec, taxonomy: &Taxonomy, rng: &mut R) -> Result<Placement> {
    let n = rng.gen_range(spec.min_objects..=spec.max_objects) as usize;
    let things: Vec<ClassId> = taxonomy.thing_classes().collect();
    if things.is_empty() && n > 0 {
        return Err(Error::Config("taxonomy has no thing classes".into()));
    }
    let mut per_class = vec![0u32; taxonomy.num_classes() as usize];
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    let mut occlusions = Vec::new();
    for k in 0..n {
        let open: Vec<ClassId> = things
            .iter()
            .copied()
            .filter(|&c| per_class[c as usize] < spec.max_per_class)
            .collect();
        let class = *open.choose(rng).ok_or(Error::PlacementFailed(k))?;
        let mut target = (k > 0 && rng.gen_bool(spec.occlusion_prob)).then(|| rng.gen_range(0..k));
        let mut placed = false;
        for attempt in 0..2 * MAX_PLACEMENT_TRIES {
            // An occluder that cannot be fitted falls back to a disjoint placement.
            if attempt == MAX_PLACEMENT_TRIES {
                target = None;
            }
            let amodal = random_shape(spec, rng);
            let overlaps: Vec<usize> = objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.amodal.intersection_area(&amodal).map_or(true, |a| a > 0))
                .map(|(i, _)| i)
                .collect();
            let ok_overlap = match target {
                Some(t) => overlaps == [t],
                None => overlaps.is_empty(),
            };
            if !ok_overlap {
                continue;
            }
            objects.push(Object { class, amodal });
            let mut ok = !exclusive(&objects, k)?.is_empty();
            if let Some(t) = target {
                ok = ok && !exclusive(&objects, t)?.is_empty();
            }
            if ok {
                placed = true;
                if let Some(t) = target {
                    occlusions.push((k, t));
                }
                break;
            }
            objects.pop();
        }
        if !placed {
            return Err(Error::PlacementFailed(k));
        }
        per_class[class as usize] += 1;
    }
    Ok((objects, occlusions))
}

/// Visible masks for objects painted in list order (later in front).
fn visible_masks(objects: &[Object]) -> Result<Vec<BinaryMask>> {
    let mut out = vec![BinaryMask::empty(0, 0); objects.len()];
    if let Some(first) = objects.first() {
        let (h, w) = first.amodal.dims();
        let mut front = BinaryMask::empty(h, w);
        for i in (0..objects.len()).rev() {
            out[i] = objects[i].amodal.difference(&front)?;
            front = front.union(&objects[i].amodal)?;
        }
    }
    Ok(out)
}

fn bands<R: Rng>(spec: &SynthSpec, taxonomy: &Taxonomy, rng: &mut R) -> Result<Vec<u8>> {
    let stuff: Vec<ClassId> = taxonomy.stuff_classes().collect();
    if stuff.is_empty() {
        return Err(Error::Config("taxonomy has no stuff classes".into()));
    }
    let k = rng.gen_range(2..=4usize).min(stuff.len());
    let classes: Vec<ClassId> = stuff.choose_multiple(rng, k).copied().collect();
    let mut cuts: Vec<u32> = (0..k - 1).map(|_| rng.gen_range(1..spec.height)).collect();
    cuts.sort_unstable();
    let mut row_class = Vec::with_capacity(spec.height as usize);
    for r in 0..spec.height {
        row_class.push(classes[cuts.iter().filter(|&&c| c <= r).count()] as u8);
    }
    Ok(row_class)
}

/// Semantic map plus panoptic outputs for objects painted over the band
/// background. Objects whose amodal mask is empty are skipped.
fn compose(
    dims: (u32, u32),
    num_classes: u32,
    background: &[u8],
    objects: &[Object],
    scores: &[f64],
) -> Result<OassOutputs> {
    let (h, w) = dims;
    let width = w as usize;
    let visible = visible_masks(objects)?;
    let mut labels = background.to_vec();
    let mut ids: Vec<u32> = background
        .iter()
        .map(|&l| {
            if l == IGNORE_LABEL {
                Ok(VOID_ID)
            } else {
                encode_segment_id(l as ClassId, STUFF_INSTANCE_INDEX)
            }
        })
        .collect::<Result<_>>()?;
    let mut next = vec![0u32; num_classes as usize];
    let mut instances = Vec::new();
    let mut amodal_instances = Vec::new();
    let mut segments = Vec::new();
    let mut thing_infos = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        if o.amodal.is_empty() {
            continue;
        }
        let id = encode_segment_id(o.class, next[o.class as usize])?;
        next[o.class as usize] += 1;
        let inst = InstanceAnnotation::new(o.class, scores[i], visible[i].clone(), o.amodal.clone())?;
        visible[i].for_each_pixel(|r, c| {
            let p = r as usize * width + c as usize;
            labels[p] = o.class as u8;
            ids[p] = id;
        });
        if !visible[i].is_empty() {
            instances.push(inst.clone());
            thing_infos.push(SegmentInfo {
                id,
                class_id: o.class,
                is_thing: true,
            });
        }
        amodal_instances.push(inst);
        segments.push(AmodalSegment {
            id,
            class_id: o.class,
            score: scores[i],
            mask: o.amodal.clone(),
        });
    }
    let mut stuff_seen = vec![false; 256];
    for &id in &ids {
        if id != VOID_ID && id % 1000 == STUFF_INSTANCE_INDEX {
            stuff_seen[(id / 1000) as usize] = true;
        }
    }
    let mut infos = thing_infos;
    for (c, _) in stuff_seen.iter().enumerate().filter(|(_, &s)| s) {
        infos.push(SegmentInfo {
            id: encode_segment_id(c as ClassId, STUFF_INSTANCE_INDEX)?,
            class_id: c as ClassId,
            is_thing: false,
        });
    }
    let semantic = SemanticMap::new(h, w, num_classes, labels)?;
    let panoptic = PanopticMap::new(h, w, ids, infos)?;
    Ok(OassOutputs {
        semantic,
        instances,
        amodal_instances,
        amodal_panoptic: AmodalPanoptic {
            map: panoptic.clone(),
            segments,
        },
        panoptic,
    })
}

/// Scene `index` of the dataset described by `spec`. Each index draws from
/// its own stream of the seeded generator, so scenes are independent of
/// how many others are generated.
pub fn synth_scene(spec: &SynthSpec, index: u64, taxonomy: &Taxonomy) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (h, w) = (spec.height, spec.width);

    let row_class = bands(spec, taxonomy, &mut rng)?;
    let clean: Vec<u8> = (0..h as usize * w as usize)
        .map(|p| row_class[p / w as usize])
        .collect();
    let mut gt_background = clean.clone();
    if rng.gen_bool(spec.void_prob) {
        let vm = shape_mask(
            h,
            w,
            rng.gen_range(0..h as i64 - 4),
            rng.gen_range(0..w as i64 - 4),
            (h / 6).max(2),
            (w / 6).max(2),
            false,
        );
        vm.for_each_pixel(|r, c| gt_background[r as usize * w as usize + c as usize] = IGNORE_LABEL);
    }

    let (objects, occlusions) = place_objects(spec, taxonomy, &mut rng)?;
    let ones = vec![1.0; objects.len()];
    let gt = compose((h, w), taxonomy.num_classes(), &gt_background, &objects, &ones)?;

    let m = spec.perturbation as i64;
    let moved: Vec<Object> = objects
        .iter()
        .map(|o| {
            let (dy, dx) = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
            Object {
                class: o.class,
                amodal: translate(&o.amodal, dy, dx),
            }
        })
        .collect();
    let scores: Vec<f64> = (0..objects.len()).map(|_| rng.gen_range(0.5..=1.0)).collect();
    let pred = compose((h, w), taxonomy.num_classes(), &clean, &moved, &scores)?;

    let certificate = if spec.certificate {
        Some(certify(&pred, &gt)?)
    } else {
        None
    };
    Ok(SynthScene {
        id: format!("scene{index:05}"),
        gt,
        pred,
        certificate,
        occlusions,
    })
}

/// Scenes `0..count`, generated in parallel.
pub fn synth_dataset(spec: &SynthSpec, count: u64, taxonomy: &Taxonomy) -> Result<Vec<SynthScene>> {
    (0..count)
        .into_par_iter()
        .map(|i| synth_scene(spec, i, taxonomy))
        .collect()
}
