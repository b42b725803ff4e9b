//! Color rendering of label maps.

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::labels::{decode_segment_id, ClassId, PanopticMap, SemanticMap, Taxonomy, IGNORE_LABEL, VOID_ID};

/// RGB color per class id. Ignore and void pixels render black.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

const STUFF_COLORS: [[u8; 3]; 11] = [
    [128, 64, 128],  // road
    [244, 35, 232],  // sidewalk
    [70, 70, 70],    // building
    [102, 102, 156], // wall
    [190, 153, 153], // fence
    [153, 153, 153], // pole
    [250, 170, 30],  // traffic light
    [220, 220, 0],   // traffic sign
    [107, 142, 35],  // vegetation
    [152, 251, 152], // terrain
    [70, 130, 180],  // sky
];

impl Palette {
    pub fn new(colors: Vec<[u8; 3]>) -> Self {
        Self { colors }
    }

    pub fn oass18() -> Self {
        let mut colors = STUFF_COLORS.to_vec();
        colors.extend([
            [220, 20, 60], // pedestrians
            [255, 0, 0],   // cyclists
            [0, 0, 142],   // car
            [0, 0, 70],    // truck
            [0, 60, 100],  // other vehicles
            [0, 80, 100],  // van
            [0, 0, 230],   // two-wheeler
        ]);
        Self { colors }
    }

    pub fn cityscapes19() -> Self {
        let mut colors = STUFF_COLORS.to_vec();
        colors.extend([
            [220, 20, 60], // person
            [255, 0, 0],   // rider
            [0, 0, 142],   // car
            [0, 0, 70],    // truck
            [0, 60, 100],  // bus
            [0, 80, 100],  // train
            [0, 0, 230],   // motorcycle
            [119, 11, 32], // bicycle
        ]);
        Self { colors }
    }

    /// Palette matching a built-in taxonomy by class count.
    pub fn for_taxonomy(taxonomy: &Taxonomy) -> Result<Self> {
        match taxonomy.num_classes() {
            18 => Ok(Self::oass18()),
            19 => Ok(Self::cityscapes19()),
            n => Err(Error::Config(format!("no built-in palette for {n} classes"))),
        }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, class_id: ClassId) -> Result<[u8; 3]> {
        if class_id == IGNORE_LABEL as ClassId {
            return Ok([0, 0, 0]);
        }
        self.colors
            .get(class_id as usize)
            .copied()
            .ok_or(Error::UnknownClass(class_id))
    }
}

pub fn render_semantic(map: &SemanticMap, palette: &Palette) -> Result<RgbImage> {
    let (h, w) = map.dims();
    let mut img = RgbImage::new(w, h);
    for (i, &l) in map.labels().iter().enumerate() {
        let i = i as u32;
        img.put_pixel(i % w, i / w, Rgb(palette.color(l as ClassId)?));
    }
    Ok(img)
}

/// Class colors with thing-segment boundaries darkened to half intensity.
/// A boundary pixel has a 4-neighbour carrying a different segment id.
pub fn render_panoptic(map: &PanopticMap, palette: &Palette) -> Result<RgbImage> {
    let (h, w) = map.dims();
    let ids = map.ids();
    let mut img = RgbImage::new(w, h);
    for r in 0..h {
        for c in 0..w {
            let id = ids[(r * w + c) as usize];
            if id == VOID_ID {
                continue;
            }
            let (class, _) = decode_segment_id(id);
            let mut rgb = palette.color(class)?;
            let thing = map.segment(id).is_some_and(|s| s.is_thing);
            if thing {
                let differs = |rr: i64, cc: i64| {
                    rr >= 0
                        && cc >= 0
                        && rr < h as i64
                        && cc < w as i64
                        && ids[(rr as u32 * w + cc as u32) as usize] != id
                };
                let (ri, ci) = (r as i64, c as i64);
                if differs(ri - 1, ci) || differs(ri + 1, ci) || differs(ri, ci - 1) || differs(ri, ci + 1) {
                    rgb = rgb.map(|v| v / 2);
                }
            }
            img.put_pixel(c, r, Rgb(rgb));
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legend_colors() {
        let p = Palette::oass18();
        let t = Taxonomy::oass18();
        assert_eq!(p.color(t.class_by_name("road").unwrap()).unwrap(), [128, 64, 128]);
        assert_eq!(p.color(t.class_by_name("pedestrians").unwrap()).unwrap(), [220, 20, 60]);
        assert_eq!(p.color(255).unwrap(), [0, 0, 0]);
        assert!(p.color(18).is_err());
        assert_eq!(Palette::for_taxonomy(&Taxonomy::cityscapes19()).unwrap().len(), 19);
    }

    #[test]
    fn semantic_rendering() {
        let m = SemanticMap::new(1, 3, 18, vec![0, 11, 255]).unwrap();
        let img = render_semantic(&m, &Palette::oass18()).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [128, 64, 128]);
        assert_eq!(img.get_pixel(1, 0).0, [220, 20, 60]);
        assert_eq!(img.get_pixel(2, 0).0, [0, 0, 0]);
    }

    #[test]
    fn thing_boundaries_darken() {
        let ids = vec![999, 13000, 13000, 13000, 999];
        let m = PanopticMap::from_ids(1, 5, ids, &Taxonomy::oass18()).unwrap();
        let img = render_panoptic(&m, &Palette::oass18()).unwrap();
        assert_eq!(img.get_pixel(1, 0).0, [0, 0, 71]);
        assert_eq!(img.get_pixel(2, 0).0, [0, 0, 142]);
        assert_eq!(img.get_pixel(0, 0).0, [128, 64, 128]);
    }
}
