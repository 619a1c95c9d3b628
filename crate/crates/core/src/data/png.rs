use std::io;
use std::path::Path;

use image::{GrayImage, ImageError, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// Gray levels at or above this are water.
pub const MASK_THRESHOLD: u8 = 128;

fn open(path: &Path) -> Result<image::DynamicImage> {
    // Surface missing files as I/O errors before the decoder sees them.
    std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    image::open(path).map_err(|e| match e {
        ImageError::IoError(source) => Error::io(path, source),
        other => Error::Decode {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })
}

fn write_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(source) => Error::io(path, source),
        other => Error::io(path, io::Error::other(other.to_string())),
    }
}

/// Loads any 8-bit image as RGB; returns `3×H×W` in `[0, 1]` and the original size.
pub fn load_rgb(path: &Path) -> Result<(Tensor, (usize, usize))> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let image = Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    });
    Ok((image, (h, w)))
}

/// Loads a grayscale mask, thresholding at [`MASK_THRESHOLD`].
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let gray = open(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let pixels = gray.as_raw().iter().map(|&g| (g >= MASK_THRESHOLD) as u8).collect();
    BinaryMask::new(h, w, pixels)
}

/// Writes a `3×H×W` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("save_rgb", format!("{c} channels")));
    }
    let data = image.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3 {
            buf.push((data[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| write_error(path, e))
}

/// Writes a mask as grayscale PNG with water 255 and background 0.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let buf = mask.pixels().iter().map(|&p| p * 255).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, buf)
        .expect("buffer sized to mask");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| write_error(path, e))
}
