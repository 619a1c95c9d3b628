//! Datasets: manifests and the train/test split, PNG loading with resizing,
//! synthetic flood scenes, and flip augmentation.

mod manifest;
mod png;
mod synth;

pub use manifest::{split, split_labels, train_count, DatasetManifest, Entry, Split, DEFAULT_TEST_RATIO};
pub use png::{load_mask, load_rgb, save_mask, save_rgb, MASK_THRESHOLD};
pub use synth::{render_scene, synthesize_scene, Blob};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// An image (`3×H×W`, values in `[0, 1]`) paired with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: BinaryMask) -> Result<Self> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::shape("sample", format!("image has {c} channels, expected 3")));
        }
        if (h, w) != (mask.height(), mask.width()) {
            return Err(Error::DimensionMismatch(format!(
                "image {h}×{w}, mask {}×{}",
                mask.height(),
                mask.width()
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParam(format!("image value {v} outside [0, 1]")));
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }
}

/// Reads an entry's image and mask and resizes both to `(height, width)`:
/// bilinear for the image, nearest-neighbour for the mask.
pub fn load_sample(entry: &Entry, target: (usize, usize)) -> Result<Sample> {
    let (image, (ih, iw)) = load_rgb(&entry.image_path)?;
    let mask = load_mask(&entry.mask_path)?;
    if (ih, iw) != (mask.height(), mask.width()) {
        return Err(Error::DimensionMismatch(format!(
            "{}: image {ih}×{iw}, mask {}×{}",
            entry.id,
            mask.height(),
            mask.width()
        )));
    }
    let image = resize_bilinear(&image, target)?;
    let mask = resize_nearest(&mask, target);
    Sample::new(entry.id.clone(), image, mask)
}

pub fn load_split(manifest: &DatasetManifest, which: Split, target: (usize, usize)) -> Result<Vec<Sample>> {
    manifest
        .of_split(which)
        .map(|e| load_sample(e, target))
        .collect()
}

/// Source coordinate of output pixel `i` under half-pixel alignment.
fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Bilinear resize of a `C×H×W` tensor with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor, (oh, ow): (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidParam("resize target must be non-empty".into()));
    }
    if (oh, ow) == (h, w) {
        return Ok(image.clone());
    }
    let taps = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|i| {
                let s = source_coord(i, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let src = image.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}

/// Nearest-neighbour index: `floor((i + 0.5) * in / out)`.
pub fn nearest_index(i: usize, in_len: usize, out_len: usize) -> usize {
    (((2 * i + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}

pub fn resize_nearest(mask: &BinaryMask, (oh, ow): (usize, usize)) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(oh, ow, |y, x| {
        mask.get(nearest_index(y, h, oh), nearest_index(x, w, ow))
    })
}

fn flip_image(image: &Tensor, horizontal: bool) -> Tensor {
    let (c, h, w) = image.chw().expect("sample images are 3-D");
    let src = image.data();
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
        src[ch * h * w + sy * w + sx]
    })
}

fn flip_mask(mask: &BinaryMask, horizontal: bool) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |y, x| {
        if horizontal {
            mask.get(y, w - 1 - x)
        } else {
            mask.get(h - 1 - y, x)
        }
    })
}

/// Mirrors left-right.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    Sample {
        id: sample.id.clone(),
        image: flip_image(&sample.image, true),
        mask: flip_mask(&sample.mask, true),
    }
}

/// Mirrors top-bottom.
pub fn flip_vertical(sample: &Sample) -> Sample {
    Sample {
        id: sample.id.clone(),
        image: flip_image(&sample.image, false),
        mask: flip_mask(&sample.mask, false),
    }
}

/// Applies a horizontal and/or vertical flip, each with probability 1/2, chosen by `seed`.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, v) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let mut out = sample.clone();
    if h {
        out = flip_horizontal(&out);
    }
    if v {
        out = flip_vertical(&out);
    }
    out
}
