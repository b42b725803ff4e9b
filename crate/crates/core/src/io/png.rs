use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageReader, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::io::io_err;
use crate::labels::{PanopticMap, SemanticMap, Taxonomy};
use crate::mask::BinaryMask;

fn read_image(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| io_err(path, e))?;
    Ok(reader.with_guessed_format().map_err(|e| io_err(path, e))?.decode()?)
}

/// 8-bit single-channel PNG, pixel = class id, 255 = ignore.
pub fn load_semantic(path: &Path, num_classes: u32) -> Result<SemanticMap> {
    match read_image(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            SemanticMap::new(h, w, num_classes, img.into_raw())
        }
        other => Err(Error::ImageFormat(format!(
            "{}: semantic maps must be 8-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_semantic(path: &Path, map: &SemanticMap) -> Result<()> {
    let img = GrayImage::from_raw(map.width(), map.height(), map.labels().to_vec()).expect("dims match");
    img.save(path)?;
    Ok(())
}

/// 16-bit single-channel PNG, pixel = class * 1000 + index, 0 = void.
pub fn load_panoptic(path: &Path, taxonomy: &Taxonomy) -> Result<PanopticMap> {
    match read_image(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            let ids = img.into_raw().into_iter().map(u32::from).collect();
            PanopticMap::from_ids(h, w, ids, taxonomy)
        }
        other => Err(Error::ImageFormat(format!(
            "{}: panoptic maps must be 16-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_panoptic(path: &Path, map: &PanopticMap) -> Result<()> {
    let data = map
        .ids()
        .iter()
        .map(|&id| u16::try_from(id).map_err(|_| Error::SegmentTable(format!("id {id} exceeds 16 bits"))))
        .collect::<Result<Vec<u16>>>()?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width(), map.height(), data).expect("dims match");
    img.save(path)?;
    Ok(())
}

/// Binary mask as an 8-bit PNG with foreground 255.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data = mask.decode().into_iter().map(|v| v * 255).collect();
    let img = GrayImage::from_raw(mask.width(), mask.height(), data).expect("dims match");
    img.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    match read_image(path)? {
        DynamicImage::ImageRgb8(img) => Ok(img),
        other => Err(Error::ImageFormat(format!(
            "{}: expected 8-bit RGB, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path)?;
    Ok(())
}
