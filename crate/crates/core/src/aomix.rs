//! Amodal-oriented mixing.
//!
//! Amodal masks from one batch image are randomly rescaled and scattered
//! into a random occluder mask `M_r`. Source pixels inside both `M_r` and the
//! source's own thing region are filled, and half of the source's semantic
//! classes are then pasted from the masked source onto a target image.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::labels::{SemanticMap, IGNORE_LABEL};
use crate::mask::BinaryMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AoMixConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub fill: [u8; 3],
    pub seed: u64,
    pub class_fraction: f64,
}

impl Default for AoMixConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.1,
            scale_max: 0.8,
            fill: [0, 0, 0],
            seed: 0,
            class_fraction: 0.5,
        }
    }
}

impl AoMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.class_fraction > 0.0 && self.class_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "class fraction {} outside (0, 1]",
                self.class_fraction
            )));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn image_dims(img: &RgbImage) -> (u32, u32) {
    (img.height(), img.width())
}

/// Nearest-neighbour resample of the mask's bounding-box content to a height
/// of `s * mask.height()` with `s` drawn uniformly from the configured range.
/// Aspect ratio is kept and the result is clipped to the image size. The
/// returned mask has the dimensions of the scaled content only.
pub fn random_scale<R: Rng + ?Sized>(m: &BinaryMask, cfg: &AoMixConfig, rng: &mut R) -> Result<BinaryMask> {
    cfg.validate()?;
    let s = rng.gen_range(cfg.scale_min..=cfg.scale_max);
    scale_to(m, s)
}

/// [`random_scale`] with a fixed ratio.
pub fn scale_to(m: &BinaryMask, s: f64) -> Result<BinaryMask> {
    let (r0, c0, r1, c1) = m.bbox().ok_or(Error::EmptyMask)?;
    let (bh, bw) = ((r1 - r0 + 1) as f64, (c1 - c0 + 1) as f64);
    let th = ((s * m.height() as f64).round() as u32).max(1);
    let tw = ((bw * th as f64 / bh).round() as u32).max(1);
    let (oh, ow) = (th.min(m.height()), tw.min(m.width()));
    Ok(BinaryMask::from_fn(oh, ow, |r, c| {
        let sr = r0 + ((r as f64 + 0.5) * bh / th as f64) as u32;
        let sc = c0 + ((c as f64 + 0.5) * bw / tw as f64) as u32;
        m.get(sr.min(r1), sc.min(c1))
    }))
}

/// Places `content` at a uniformly random offset inside an image of `dims`.
pub fn random_pad<R: Rng + ?Sized>(content: &BinaryMask, dims: (u32, u32), rng: &mut R) -> Result<BinaryMask> {
    let (h, w) = dims;
    let (ch, cw) = content.dims();
    if ch > h || cw > w {
        return Err(Error::Shape(format!("content {ch}x{cw} larger than image {h}x{w}")));
    }
    let dr = rng.gen_range(0..=h - ch);
    let dc = rng.gen_range(0..=w - cw);
    Ok(place(content, dims, (dr, dc)))
}

fn place(content: &BinaryMask, dims: (u32, u32), offset: (u32, u32)) -> BinaryMask {
    let (ch, cw) = content.dims();
    BinaryMask::from_fn(dims.0, dims.1, |r, c| {
        r >= offset.0
            && c >= offset.1
            && r - offset.0 < ch
            && c - offset.1 < cw
            && content.get(r - offset.0, c - offset.1)
    })
}

/// Union of randomly scaled and placed copies of every mask in `seq`.
pub fn build_random_mask<R: Rng + ?Sized>(seq: &[BinaryMask], cfg: &AoMixConfig, rng: &mut R) -> Result<BinaryMask> {
    let first = seq.first().ok_or(Error::EmptySequence)?;
    let dims = first.dims();
    let mut out = BinaryMask::empty(dims.0, dims.1);
    for m in seq {
        if m.dims() != dims {
            return Err(dims_mismatch(dims, m.dims()));
        }
        let scaled = random_scale(m, cfg, rng)?;
        out = out.union(&random_pad(&scaled, dims, rng)?)?;
    }
    Ok(out)
}

/// Fills source pixels lying in both `random_mask` and the union of the
/// source's own amodal masks.
pub fn mask_source_image(
    source: &RgbImage,
    amodal_masks: &[BinaryMask],
    random_mask: &BinaryMask,
    cfg: &AoMixConfig,
) -> Result<RgbImage> {
    let dims = image_dims(source);
    if random_mask.dims() != dims {
        return Err(dims_mismatch(dims, random_mask.dims()));
    }
    let things = BinaryMask::union_all(dims.0, dims.1, amodal_masks)?;
    let hit = things.intersection(random_mask)?;
    let mut out = source.clone();
    hit.for_each_pixel(|r, c| out.put_pixel(c, r, Rgb(cfg.fill)));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    pub masked_source: RgbImage,
    pub mixed_image: RgbImage,
    pub mixed_label: SemanticMap,
    /// Row-major; true where the mixed pixel came from the masked source.
    pub provenance: Vec<bool>,
    pub selected_classes: Vec<u8>,
}

/// Pastes `ceil(k * class_fraction)` of the `k` classes present in
/// `source_labels` from the masked source onto the target.
pub fn class_mix<R: Rng + ?Sized>(
    masked_source: &RgbImage,
    source_labels: &SemanticMap,
    target: &RgbImage,
    cfg: &AoMixConfig,
    rng: &mut R,
) -> Result<MixResult> {
    cfg.validate()?;
    let dims = image_dims(masked_source);
    source_labels.check_dims(dims)?;
    if image_dims(target) != dims {
        return Err(dims_mismatch(dims, image_dims(target)));
    }
    let present = source_labels.classes_present();
    let n = (present.len() as f64 * cfg.class_fraction).ceil() as usize;
    let mut selected: Vec<u8> = present.choose_multiple(rng, n).copied().collect();
    selected.sort_unstable();
    let mut chosen = [false; 256];
    for &c in &selected {
        chosen[c as usize] = true;
    }

    let provenance: Vec<bool> = source_labels.labels().iter().map(|&l| chosen[l as usize]).collect();
    let labels: Vec<u8> = source_labels
        .labels()
        .iter()
        .zip(&provenance)
        .map(|(&l, &p)| if p { l } else { IGNORE_LABEL })
        .collect();
    let width = dims.1;
    let mixed_image = RgbImage::from_fn(dims.1, dims.0, |c, r| {
        if provenance[(r * width + c) as usize] {
            *masked_source.get_pixel(c, r)
        } else {
            *target.get_pixel(c, r)
        }
    });
    Ok(MixResult {
        masked_source: masked_source.clone(),
        mixed_image,
        mixed_label: SemanticMap::new(dims.0, dims.1, source_labels.num_classes(), labels)?,
        provenance,
        selected_classes: selected,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AoMixOutput {
    pub random_mask: BinaryMask,
    pub mix: MixResult,
}

/// Full augmentation seeded from `cfg.seed`. `occluder_masks` are the amodal
/// masks of the batch image supplying shapes for `M_r`; it may be the source
/// itself.
pub fn aomix(
    source: &RgbImage,
    source_labels: &SemanticMap,
    source_amodal: &[BinaryMask],
    occluder_masks: &[BinaryMask],
    target: &RgbImage,
    cfg: &AoMixConfig,
) -> Result<AoMixOutput> {
    cfg.validate()?;
    let mut rng = cfg.rng();
    let random_mask = build_random_mask(occluder_masks, cfg, &mut rng)?;
    let masked = mask_source_image(source, source_amodal, &random_mask, cfg)?;
    let mix = class_mix(&masked, source_labels, target, cfg, &mut rng)?;
    Ok(AoMixOutput { random_mask, mix })
}
