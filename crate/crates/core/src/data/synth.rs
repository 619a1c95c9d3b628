//! Procedural flood scenes: textured dry land with smooth water blobs.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

const LAND_DARK: [f64; 3] = [0.42, 0.36, 0.22];
const LAND_LIGHT: [f64; 3] = [0.55, 0.62, 0.34];
const WATER_DEEP: [f64; 3] = [0.10, 0.22, 0.40];
const WATER_SHALLOW: [f64; 3] = [0.22, 0.38, 0.52];
const HARMONICS: usize = 3;

/// A star-shaped region: `r(θ) = radius · (1 + Σ aₖ cos(kθ + φₖ))`, k = 2, 3, 4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    pub radius: f64,
    pub harmonics: [(f64, f64); HARMONICS],
}

impl Blob {
    pub fn disc(center: (f64, f64), radius: f64) -> Self {
        Blob {
            center,
            radius,
            harmonics: [(0.0, 0.0); HARMONICS],
        }
    }

    fn random(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> Self {
        let short = h.min(w) as f64;
        let center = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let radius = rng.gen_range(0.15..0.35) * short;
        let harmonics = std::array::from_fn(|_| (rng.gen_range(0.0..0.15), rng.gen_range(0.0..TAU)));
        Blob {
            center,
            radius,
            harmonics,
        }
    }

    /// Whether the pixel centred at `(y + 0.5, x + 0.5)` lies inside.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.center.0;
        let dx = x as f64 + 0.5 - self.center.1;
        let theta = dy.atan2(dx);
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, phase))| a * ((k + 2) as f64 * theta + phase).cos())
            .sum();
        dy.hypot(dx) <= self.radius * (1.0 + wobble)
    }
}

/// Smooth noise in `[0, 1]`: random lattice values, smoothstep-interpolated.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, (h, w): (usize, usize), cell: f64) -> Self {
        let rows = (h as f64 / cell).ceil() as usize + 2;
        let cols = (w as f64 / cell).ceil() as usize + 2;
        let lattice = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
        ValueNoise {
            cell,
            cols,
            lattice,
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let (gy, gx) = (y as f64 / self.cell, x as f64 / self.cell);
        let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fy, fx) = (smooth(gy.fract()), smooth(gx.fract()));
        let v = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - fx) + v(iy, ix + 1) * fx;
        let bottom = v(iy + 1, ix) * (1.0 - fx) + v(iy + 1, ix + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
}

/// Paints a scene whose water mask is exactly the union of `blobs`; textures come from `seed`.
pub fn render_scene(seed: u64, (h, w): (usize, usize), blobs: &[Blob]) -> Result<Sample> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidParam(format!("scene size {h}×{w} is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e37_u64);
    let coarse = ValueNoise::new(&mut rng, (h, w), 12.0);
    let fine = ValueNoise::new(&mut rng, (h, w), 3.0);
    let ripple = ValueNoise::new(&mut rng, (h, w), 5.0);

    let mask = BinaryMask::from_fn(h, w, |y, x| blobs.iter().any(|b| b.contains(y, x)));
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let rgb = if mask.get(y, x) {
                let base = mix(WATER_DEEP, WATER_SHALLOW, ripple.at(y, x));
                base.map(|v| v + 0.04 * (fine.at(y, x) - 0.5))
            } else {
                let base = mix(LAND_DARK, LAND_LIGHT, coarse.at(y, x));
                base.map(|v| v + 0.16 * (fine.at(y, x) - 0.5))
            };
            for (c, v) in rgb.into_iter().enumerate() {
                data[c * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let image = Tensor::new([3, h, w], data)?;
    Sample::new(format!("scene{seed}"), image, mask)
}

/// Random scene with `n_blobs` water regions, fully determined by `seed`.
pub fn synthesize_scene(seed: u64, size: (usize, usize), n_blobs: usize) -> Result<Sample> {
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::InvalidParam(format!("scene size {}×{} is empty", size.0, size.1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<Blob> = (0..n_blobs).map(|_| Blob::random(&mut rng, size)).collect();
    render_scene(seed, size, &blobs)
}
