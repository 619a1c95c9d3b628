//! Binary-mask metrics: Flood Capacity, per-class IoU / mIoU, pixel accuracy,
//! and the per-image report with mean and population standard deviation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `height × width` grid of `{0, 1}` labels, row-major; 1 is water.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height * width != pixels.len() {
            return Err(Error::shape(
                "mask",
                format!("{height}×{width} needs {} pixels, got {}", height * width, pixels.len()),
            ));
        }
        if let Some(bad) = pixels.iter().find(|&&p| p > 1) {
            return Err(Error::InvalidParam(format!("mask pixel value {bad} is not 0 or 1")));
        }
        Ok(BinaryMask {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        BinaryMask {
            height,
            width,
            pixels: vec![value as u8; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    pub fn count_water(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    pub fn complement(&self) -> Self {
        BinaryMask {
            pixels: self.pixels.iter().map(|p| 1 - p).collect(),
            ..self.clone()
        }
    }

    pub fn transpose(&self) -> Self {
        BinaryMask::from_fn(self.width, self.height, |y, x| self.get(x, y))
    }

    /// `1×H×W` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.pixels.iter().map(|&p| p as f64).collect(),
        )
        .expect("mask dimensions are positive")
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                "mask metric",
                format!(
                    "{}×{} vs {}×{}",
                    self.height, self.width, other.height, other.width
                ),
            ));
        }
        Ok(())
    }
}

/// Fraction of water pixels: `#{p = 1} / #{p ∈ {0, 1}}`.
pub fn flood_capacity(mask: &BinaryMask) -> Result<f64> {
    if mask.pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(mask.count_water() as f64 / mask.pixels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouScores {
    pub iou_water: f64,
    pub iou_background: f64,
    /// Unweighted mean of the two class IoUs.
    pub miou: f64,
}

/// Per-class IoU. A class absent from both masks scores 1.
pub fn miou(pred: &BinaryMask, truth: &BinaryMask) -> Result<IouScores> {
    pred.check_same_dims(truth)?;
    // counts[pred][truth]
    let mut counts = [[0usize; 2]; 2];
    for (&p, &t) in pred.pixels.iter().zip(&truth.pixels) {
        counts[p as usize][t as usize] += 1;
    }
    let iou = |c: usize| {
        let inter = counts[c][c];
        let union = inter + counts[c][1 - c] + counts[1 - c][c];
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    let (iou_water, iou_background) = (iou(1), iou(0));
    Ok(IouScores {
        iou_water,
        iou_background,
        miou: (iou_water + iou_background) / 2.0,
    })
}

pub fn pixel_accuracy(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    pred.check_same_dims(truth)?;
    if pred.pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    let agree = pred
        .pixels
        .iter()
        .zip(&truth.pixels)
        .filter(|(p, t)| p == t)
        .count();
    Ok(agree as f64 / pred.pixels.len() as f64)
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel is water iff its probability is `>= threshold`.
pub fn binarize(probabilities: &Tensor, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParam(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let (c, h, w) = probabilities.chw()?;
    if c != 1 {
        return Err(Error::shape(
            "binarize",
            format!("expected 1×H×W probabilities, got {:?}", probabilities.shape()),
        ));
    }
    if let Some(bad) = probabilities.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidParam(format!("probability {bad} outside [0, 1]")));
    }
    let pixels = probabilities
        .data()
        .iter()
        .map(|&p| (p >= threshold) as u8)
        .collect();
    BinaryMask::new(h, w, pixels)
}

/// Metrics for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub fc: f64,
    pub iou_water: f64,
    pub iou_background: f64,
    pub miou: f64,
    pub pa: f64,
}

impl ImageMetrics {
    /// Scores a prediction against ground truth; `fc` is that of the prediction.
    pub fn score(id: impl Into<String>, pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        let iou = miou(pred, truth)?;
        Ok(ImageMetrics {
            id: id.into(),
            fc: flood_capacity(pred)?,
            iou_water: iou.iou_water,
            iou_background: iou.iou_background,
            miou: iou.miou,
            pa: pixel_accuracy(pred, truth)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub miou_mean: f64,
    pub miou_std: f64,
    pub pa_mean: f64,
    pub pa_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloodReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
}

/// Mean and population standard deviation.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(per_image: Vec<ImageMetrics>) -> Result<FloodReport> {
    if per_image.is_empty() {
        return Err(Error::EmptyInput("no per-image metrics to aggregate"));
    }
    let (miou_mean, miou_std) = mean_std(per_image.iter().map(|m| m.miou));
    let (pa_mean, pa_std) = mean_std(per_image.iter().map(|m| m.pa));
    Ok(FloodReport {
        per_image,
        aggregate: Aggregate {
            miou_mean,
            miou_std,
            pa_mean,
            pa_std,
        },
    })
}

pub const AGGREGATE_TAG: &str = "AGGREGATE";

impl FloodReport {
    /// One tab-separated line per image (`id fc iou_water iou_background miou pa`),
    /// then `AGGREGATE miou_mean miou_std pa_mean pa_std`; six fractional digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.per_image {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                m.id, m.fc, m.iou_water, m.iou_background, m.miou, m.pa
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            out,
            "{AGGREGATE_TAG}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            a.miou_mean, a.miou_std, a.pa_mean, a.pa_std
        );
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::format("report", format!("bad line `{line}`"));
        let mut per_image = Vec::new();
        let mut aggregate = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let nums = |fs: &[&str]| -> Result<Vec<f64>> {
                fs.iter().map(|f| f.parse().map_err(|_| bad(line))).collect()
            };
            if fields[0] == AGGREGATE_TAG {
                let v = nums(&fields[1..])?;
                let [miou_mean, miou_std, pa_mean, pa_std] = v[..] else {
                    return Err(bad(line));
                };
                aggregate = Some(Aggregate {
                    miou_mean,
                    miou_std,
                    pa_mean,
                    pa_std,
                });
            } else {
                if aggregate.is_some() {
                    return Err(Error::format("report", "records after the aggregate line"));
                }
                let v = nums(fields.get(1..).ok_or_else(|| bad(line))?)?;
                let [fc, iou_water, iou_background, miou, pa] = v[..] else {
                    return Err(bad(line));
                };
                per_image.push(ImageMetrics {
                    id: fields[0].to_string(),
                    fc,
                    iou_water,
                    iou_background,
                    miou,
                    pa,
                });
            }
        }
        let aggregate =
            aggregate.ok_or_else(|| Error::format("report", "missing AGGREGATE line"))?;
        Ok(FloodReport {
            per_image,
            aggregate,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
