use super::gradcheck;
use super::*;
use crate::error::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Six nested loops, no padding tricks: reads zero outside the image.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, w) = x.chw().unwrap();
    let (co, kk) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = Tensor::zeros([co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.at(&[c, iy as usize, ix as usize]) * k.at(&[o, c, ky, kx]);
                        }
                    }
                }
                out.data_mut()[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    out
}

/// Bilinear resampling evaluated pixel by pixel from the half-pixel mapping.
fn naive_upsample(x: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let mut out = Tensor::zeros([c, h * f, w * f]);
    let coord = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    for ch in 0..c {
        for oy in 0..h * f {
            for ox in 0..w * f {
                let (y0, y1, wy) = coord(oy, h);
                let (x0, x1, wx) = coord(ox, w);
                let v = (1.0 - wy) * (1.0 - wx) * x.at(&[ch, y0, x0])
                    + (1.0 - wy) * wx * x.at(&[ch, y0, x1])
                    + wy * (1.0 - wx) * x.at(&[ch, y1, x0])
                    + wy * wx * x.at(&[ch, y1, x1]);
                out.data_mut()[(ch * h * f + oy) * w * f + ox] = v;
            }
        }
    }
    out
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(matches!(
        Tensor::new(vec![2, 2], vec![1.0; 3]),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(Tensor::new(vec![0], vec![]).is_err());
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[3.0, -1.0, 0.5, 7.0]));
    let p = tape.matmul(id, m).unwrap();
    assert_eq!(tape.value(p).data(), tape.value(m).data());

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

    let a = tape.constant(Tensor::ones([3, 4]));
    let b = tape.constant(Tensor::ones([5, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones([1, 3, 3]));
    let k = tape.constant(Tensor::full([1, 1, 1, 1], 2.0));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::full([1, 3, 3], 2.0));

    let x = tape.constant(Tensor::ones([1, 4, 4]));
    let k = tape.constant(Tensor::ones([1, 1, 3, 3]));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2]);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv = rand_tensor(&mut rng, &[1, 5, 5]);
    let kv = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let x = tape.constant(xv.clone());
    let k = tape.constant(kv.clone());
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    let expected = naive_conv(&xv, &kv, 1, 0);
    assert!(close(tape.value(y).data(), expected.data(), 1e-12));
}

#[test]
fn conv2d_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones([2, 4, 4]));
    let k = tape.constant(Tensor::ones([1, 3, 3, 3]));
    assert!(matches!(tape.conv2d(x, k, 1, 0), Err(Error::ShapeMismatch { .. })));
    let k = tape.constant(Tensor::ones([1, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, k, 0, 0), Err(Error::InvalidParam(_))));
    let k = tape.constant(Tensor::ones([1, 2, 7, 7]));
    assert!(tape.conv2d(x, k, 1, 1).is_err());
}

#[test]
fn conv2d_matches_naive_reference_up_to_2x3x8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..60 {
        let ci = rng.gen_range(1..=3);
        let co = rng.gen_range(1..=2);
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let k = *[1usize, 2, 3].get(rng.gen_range(0..3)).unwrap();
        let pad = rng.gen_range(0..=2);
        let stride = rng.gen_range(1..=3);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let xv = rand_tensor(&mut rng, &[ci, h, w]);
        let kv = rand_tensor(&mut rng, &[co, ci, k, k]);
        let mut tape = Tape::new();
        let (x, kk) = (tape.constant(xv.clone()), tape.constant(kv.clone()));
        let y = tape.conv2d(x, kk, stride, pad).unwrap();
        let expected = naive_conv(&xv, &kv, stride, pad);
        assert_eq!(tape.shape(y), expected.shape());
        assert!(close(tape.value(y).data(), expected.data(), 1e-12));
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([3]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(close(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-15));

    let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(close(
        tape.value(y).data(),
        &[0.09003057, 0.24472847, 0.66524096],
        1e-8
    ));

    assert!(matches!(tape.softmax(x, 1), Err(Error::InvalidParam(_))));
}

#[test]
fn softmax_rows_sum_to_one_and_are_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xv = Tensor::from_fn([4, 7], |_| rng.gen_range(-30.0..30.0));
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let y = tape.softmax(x, 1).unwrap();
    let shifted = tape.add_scalar(x, 123.0);
    let ys = tape.softmax(shifted, 1).unwrap();
    for row in tape.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p > 0.0));
    }
    assert!(close(tape.value(y).data(), tape.value(ys).data(), 1e-9));

    // axis 0 normalizes columns
    let yc = tape.softmax(x, 0).unwrap();
    for c in 0..7 {
        let s: f64 = (0..4).map(|r| tape.value(yc).at(&[r, c])).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let m = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.0, 4.0]));
    let ones = tape.constant(Tensor::ones([2, 2]));
    let p = tape.elementwise(Elementwise::Mul, ones, Some(m)).unwrap();
    assert_eq!(tape.value(p).data(), tape.value(m).data());

    let z = tape.constant(Tensor::zeros([1]));
    let s = tape.elementwise(Elementwise::Sigmoid, z, None).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);

    let r = tape.constant(t(&[2], &[-1.0, 2.0]));
    let y = tape.elementwise(Elementwise::Relu, r, None).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let a = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::ones([3]));
    assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    assert!(tape.elementwise(Elementwise::Relu, a, Some(a)).is_err());

    let g = tape.constant(t(&[3], &[-1.0, 0.0, 1.0]));
    let gy = tape.gelu(g);
    assert!(close(tape.value(gy).data(), &[-0.158808, 0.0, 0.841192], 1e-6));
}

#[test]
fn layernorm_examples() {
    let mut tape = Tape::new();
    let ones = tape.constant(Tensor::ones([2]));
    let zeros = tape.constant(Tensor::zeros([2]));
    let x = tape.constant(Tensor::full([1, 2], 5.0));
    let y = tape.layernorm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layernorm(x, ones, zeros, 1e-12).unwrap();
    assert!(close(tape.value(y).data(), &[-1.0, 1.0], 1e-9));

    let b = tape.constant(t(&[2], &[0.25, -3.0]));
    let zero_gamma = tape.constant(Tensor::zeros([2]));
    let x = tape.constant(t(&[2, 2], &[1.0, 9.0, -4.0, 2.0]));
    let y = tape.layernorm(x, zero_gamma, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25, -3.0, 0.25, -3.0]);

    assert!(matches!(
        tape.layernorm(x, ones, zeros, 0.0),
        Err(Error::InvalidParam(_))
    ));
}

#[test]
fn layernorm_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&mut rng, &[5, 16]));
    let g = tape.constant(Tensor::ones([16]));
    let b = tape.constant(Tensor::zeros([16]));
    let y = tape.layernorm(x, g, b, 1e-12).unwrap();
    for row in tape.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xv = rand_tensor(&mut rng, &[2, 3, 5]);
    let x = tape.constant(xv.clone());
    let y = tape.upsample_bilinear(x, 1).unwrap();
    assert_eq!(tape.value(y), &xv);

    let c = tape.constant(Tensor::full([2, 3, 3], 0.7));
    for f in 2..5 {
        let y = tape.upsample_bilinear(c, f).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    let sq = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let x = tape.constant(sq.clone());
    let y = tape.upsample_bilinear(x, 2).unwrap();
    let expected = naive_upsample(&sq, 2);
    assert!(close(tape.value(y).data(), expected.data(), 1e-12));
    // first row: clamped edge, then quarter steps
    assert!(close(&tape.value(y).data()[..4], &[1.0, 1.25, 1.75, 2.0], 1e-12));

    let y = tape.upsample_bilinear(x, 3).unwrap();
    assert!(close(tape.value(y).data(), naive_upsample(&sq, 3).data(), 1e-12));
    assert!(matches!(tape.upsample_bilinear(x, 0), Err(Error::InvalidParam(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn([2, 3], |i| i as f64));
    let s = tape.sum(x);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[1.0; 6]);
    let leaf = grads.leaf(x).unwrap();
    assert!(leaf.requires_grad());
    assert_eq!(leaf.grad().unwrap().len(), 6);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones([2]));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
}

#[test]
fn backward_skips_constants_and_unreachable_leaves() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones([2]));
    let p = tape.param(Tensor::ones([2]));
    let unused = tape.param(Tensor::ones([3]));
    let y = tape.mul(c, p).unwrap();
    let s = tape.sum(y);
    let grads = tape.backward(s).unwrap();
    assert!(grads.wrt(c).is_none());
    assert!(grads.wrt(unused).is_none());
    assert_eq!(grads.wrt(p).unwrap(), &[1.0, 1.0]);
}

/// Reduces a tensor-valued op to a scalar with fixed random weights so every
/// output element contributes a distinct coefficient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::from_fn(tape.shape(y).to_vec(), |_| {
        rng.gen_range(-1.0..1.0)
    }));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_gradcheck<F>(inputs: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    let report = gradcheck::check(inputs, build, 1e-4, |_, _| true).unwrap();
    let worst = report.worst().copied();
    assert!(report.all_within(1e-3), "worst comparison: {worst:?}");
}

#[test]
fn gradcheck_linear_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    assert_gradcheck(&[a.clone(), b], |tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        weighted_sum(tp, y, 1)
    });
    assert_gradcheck(std::slice::from_ref(&a), |tp, v| {
        let y = tp.transpose(v[0])?;
        weighted_sum(tp, y, 2)
    });
    let bias = rand_tensor(&mut rng, &[4]);
    assert_gradcheck(&[a.clone(), bias], |tp, v| {
        let y = tp.add_row_bias(v[0], v[1])?;
        weighted_sum(tp, y, 3)
    });
    let other = rand_tensor(&mut rng, &[3, 4]);
    assert_gradcheck(&[a.clone(), other.clone()], |tp, v| {
        let y = tp.concat(&[v[0], v[1]], 1)?;
        let z = tp.slice(y, 1, 2, 7)?;
        weighted_sum(tp, z, 4)
    });
    let denom = Tensor::from_fn([3, 4], |i| 1.5 + i as f64 * 0.1);
    assert_gradcheck(&[a, denom], |tp, v| {
        let y = tp.div(v[0], v[1])?;
        let y = tp.sub(y, v[0])?;
        weighted_sum(tp, y, 5)
    });
}

#[test]
fn gradcheck_pointwise_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = rand_tensor(&mut rng, &[4, 6]);
    for op in [Elementwise::Relu, Elementwise::Gelu, Elementwise::Sigmoid] {
        assert_gradcheck(std::slice::from_ref(&x), |tp, v| {
            let y = tp.elementwise(op, v[0], None)?;
            weighted_sum(tp, y, 6)
        });
    }
    let x2 = rand_tensor(&mut rng, &[4, 6]);
    for op in [Elementwise::Add, Elementwise::Mul] {
        assert_gradcheck(&[x.clone(), x2.clone()], |tp, v| {
            let y = tp.elementwise(op, v[0], Some(v[1]))?;
            weighted_sum(tp, y, 7)
        });
    }
    for axis in 0..2 {
        assert_gradcheck(std::slice::from_ref(&x), |tp, v| {
            let y = tp.softmax(v[0], axis)?;
            weighted_sum(tp, y, 8)
        });
    }
    let gamma = rand_tensor(&mut rng, &[6]);
    let beta = rand_tensor(&mut rng, &[6]);
    assert_gradcheck(&[x.clone(), gamma, beta], |tp, v| {
        let y = tp.layernorm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(tp, y, 9)
    });
    assert_gradcheck(&[x], |tp, v| {
        let m = tp.mean(v[0]);
        let s = tp.add_scalar(m, 3.0);
        let y = tp.scale(s, -2.0);
        tp.mul(y, y)
    });
}

#[test]
fn gradcheck_spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = rand_tensor(&mut rng, &[2, 5, 6]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
        assert_gradcheck(&[x.clone(), k.clone()], |tp, v| {
            let y = tp.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(tp, y, 10)
        });
    }
    for f in [1, 2, 3] {
        assert_gradcheck(std::slice::from_ref(&x), |tp, v| {
            let y = tp.upsample_bilinear(v[0], f)?;
            weighted_sum(tp, y, 11)
        });
    }
    let bias = rand_tensor(&mut rng, &[2]);
    assert_gradcheck(&[x.clone(), bias.clone()], |tp, v| {
        let y = tp.add_channel_bias(v[0], v[1])?;
        weighted_sum(tp, y, 12)
    });
    assert_gradcheck(&[x.clone(), bias], |tp, v| {
        let y = tp.scale_channels(v[0], v[1])?;
        weighted_sum(tp, y, 13)
    });
    let map = rand_tensor(&mut rng, &[1, 5, 6]);
    assert_gradcheck(&[x.clone(), map], |tp, v| {
        let y = tp.scale_spatial(v[0], v[1])?;
        weighted_sum(tp, y, 14)
    });
    assert_gradcheck(std::slice::from_ref(&x), |tp, v| {
        let a = tp.global_avg_pool(v[0])?;
        let b = tp.channel_mean(v[0])?;
        let c = tp.channel_max(v[0])?;
        let (a, b, c) = (
            weighted_sum(tp, a, 15)?,
            weighted_sum(tp, b, 16)?,
            weighted_sum(tp, c, 17)?,
        );
        let ab = tp.add(a, b)?;
        tp.add(ab, c)
    });
    let img = rand_tensor(&mut rng, &[3, 4, 4]);
    assert_gradcheck(&[img], |tp, v| {
        let y = tp.patchify(v[0], 2)?;
        let y = tp.reshape(y, vec![8, 6])?;
        weighted_sum(tp, y, 18)
    });
}

#[test]
fn gradcheck_bce_with_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let logits = Tensor::from_fn([1, 4, 4], |_| rng.gen_range(-4.0..4.0));
    let target = Tensor::from_fn([1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    assert_gradcheck(&[logits], |tp, v| tp.bce_with_logits(v[0], &target));
}

#[test]
fn bce_is_stable_for_extreme_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[800.0, -800.0]));
    let loss = tape.bce_with_logits(x, &t(&[2], &[1.0, 0.0])).unwrap();
    assert!(tape.value(loss).item().unwrap().abs() < 1e-300);
    let loss = tape.bce_with_logits(x, &t(&[2], &[0.0, 1.0])).unwrap();
    assert!((tape.value(loss).item().unwrap() - 800.0).abs() < 1e-9);
}

#[test]
fn patchify_orders_tiles_in_raster_order() {
    let mut tape = Tape::new();
    let img = tape.constant(Tensor::from_fn([1, 4, 4], |i| i as f64));
    let p = tape.patchify(img, 2).unwrap();
    assert_eq!(tape.shape(p), &[4, 4]);
    assert_eq!(&tape.value(p).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&tape.value(p).data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    assert!(tape.patchify(img, 3).is_err());
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let x = tape.param(rand_tensor(&mut rng, &[2, 6, 6]));
        let k = tape.param(rand_tensor(&mut rng, &[3, 2, 3, 3]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        let y = tape.gelu(y);
        let y = tape.upsample_bilinear(y, 2).unwrap();
        let s = tape.sum(y);
        let out = tape.value(y).clone();
        let grads = tape.backward(s).unwrap();
        (out, grads.wrt(k).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ga, gb);
}
