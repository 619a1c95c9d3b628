//! Raw slice kernels shared by the tape's forward and backward rules.

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Range of output columns `ox` for which `ox*stride + kx - pad` lands in `[0, w)`.
    fn valid_out(&self, kx: usize, len: usize, out_len: usize) -> (usize, usize) {
        // ix = ox*s + kx - pad >= 0  =>  ox >= ceil((pad - kx)/s)
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // ix <= len - 1  =>  ox <= (len - 1 + pad - kx)/s
        let hi = if len + self.pad > kx {
            ((len - 1 + self.pad - kx) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub fn conv2d(input: &[f64], kernel: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.c_out * oh * ow];
    for co in 0..g.c_out {
        let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let iplane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_out(ky, g.h, oh);
                for kx in 0..g.k {
                    let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_out(kx, g.w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_grad_input(grad_out: &[f64], kernel: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gin = vec![0.0; g.c_in * g.h * g.w];
    for co in 0..g.c_out {
        let gplane = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let iplane = &mut gin[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_out(ky, g.h, oh);
                for kx in 0..g.k {
                    let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_out(kx, g.w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &mut iplane[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            irow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    gin
}

pub fn conv2d_grad_kernel(grad_out: &[f64], input: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gk = vec![0.0; g.c_out * g.c_in * g.k * g.k];
    for co in 0..g.c_out {
        let gplane = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let iplane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_out(ky, g.h, oh);
                for kx in 0..g.k {
                    let (ox0, ox1) = g.valid_out(kx, g.w, ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                        }
                    }
                    gk[((co * g.c_in + ci) * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    }
    gk
}

/// Per-output-index source taps `(i0, i1, weight_of_i1)` for half-pixel
/// (align_corners=false) bilinear resampling of one axis.
pub fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out_len = in_len * factor;
    let scale = 1.0 / factor as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                out[(ch * oh + oy) * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample_bilinear_grad(
    grad_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gin[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = grad_out[(ch * oh + oy) * ow + ox];
                plane[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                plane[y0 * w + x1] += gv * (1.0 - ly) * lx;
                plane[y1 * w + x0] += gv * ly * (1.0 - lx);
                plane[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    gin
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| x[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (x[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    out
}

pub fn softmax_grad(y: &[f64], gy: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let dot: f64 = (0..len).map(|a| y[idx(a)] * gy[idx(a)]).sum();
            for a in 0..len {
                gx[idx(a)] = y[idx(a)] * (gy[idx(a)] - dot);
            }
        }
    }
    gx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    use super::{GELU_CUBIC, GELU_SQRT_2_OVER_PI};
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    use super::{GELU_CUBIC, GELU_SQRT_2_OVER_PI};
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
