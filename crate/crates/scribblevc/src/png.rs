//! 8-bit grayscale PNG storage for images, masks and scribbles.
//!
//! Intensities are quantized to `round(255 * v)`; label grids store the
//! class id directly, with the scribble sentinel `K` stored as `K`.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use scribblevc_core::dataset::{DenseMask, Image, ScribbleMask};

use crate::error::{Error, Result};

fn write_gray(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    img.save(path).map_err(|e| image_error(path, e))
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_error(path, e))?;
    if !matches!(img, image::DynamicImage::ImageLuma8(_)) {
        return Err(Error::parse(path, "expected an 8-bit grayscale PNG"));
    }
    let g = img.into_luma8();
    Ok((g.height() as usize, g.width() as usize, g.into_raw()))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other),
    }
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let data = img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_gray(path, img.width, img.height, data)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let (h, w, data) = read_gray(path)?;
    let pixels = data.into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h, w, pixels).map_err(|e| Error::parse(path, e))
}

pub fn save_mask(mask: &DenseMask, path: &Path) -> Result<()> {
    write_gray(path, mask.width, mask.height, mask.labels.clone())
}

pub fn load_mask(path: &Path, num_classes: usize) -> Result<DenseMask> {
    let (h, w, data) = read_gray(path)?;
    DenseMask::new(h, w, num_classes, data).map_err(|e| Error::parse(path, e))
}

pub fn save_scribble(s: &ScribbleMask, path: &Path) -> Result<()> {
    write_gray(path, s.width, s.height, s.labels.clone())
}

pub fn load_scribble(path: &Path, num_classes: usize) -> Result<ScribbleMask> {
    let (h, w, data) = read_gray(path)?;
    ScribbleMask::new(h, w, num_classes, data).map_err(|e| Error::parse(path, e))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| image_error(path, e))
}
