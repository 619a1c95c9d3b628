use super::*;
use crate::tensor::gradcheck;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 8,
        depth: 1,
        heads: 2,
        embed_dim: 8,
        mlp_hidden: 8,
        decoder_channels: [4, 3, 2],
        cnn_channels: [4, 3, 2],
        fusion_channels: [3, 3, 2],
        seed: 3,
    }
}

fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, h, w], |_| rng.gen_range(0.0..1.0))
}

fn spatial(tape: &Tape, v: Var) -> (usize, usize) {
    let s = tape.shape(v);
    (s[1], s[2])
}

fn zero_params(model: &mut FloodTransformer, prefix: &str) {
    for (name, t) in model.params.names().to_vec().iter().zip(model.params.tensors_mut())
    {
        if name.starts_with(prefix) {
            t.data_mut().fill(0.0);
        }
    }
}

#[test]
fn patch_embed_token_counts() {
    let cfg = ModelConfig {
        image_height: 64,
        image_width: 64,
        patch_size: 16,
        ..ModelConfig::toy()
    };
    let model = FloodTransformer::new(cfg).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let x = tape.constant(random_image(1, 64, 64));
    let tokens = model.patch_embed(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(tokens), &[16, 32]);

    let single = ModelConfig {
        image_height: 8,
        image_width: 8,
        patch_size: 8,
        ..ModelConfig::toy()
    };
    let model = FloodTransformer::new(single).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let x = tape.constant(random_image(2, 8, 8));
    let tokens = model.patch_embed(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(tokens), &[1, 32]);

    let wrong = tape.constant(random_image(2, 16, 8));
    assert!(matches!(
        model.patch_embed(&mut tape, &p, wrong),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn patch_embed_is_linear() {
    let mut model = FloodTransformer::new(ModelConfig::toy()).unwrap();
    zero_params(&mut model, "patch.");
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros([3, 32, 32]));
    let tokens = model.patch_embed(&mut tape, &p, x).unwrap();
    assert!(tape.value(tokens).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encode_with_no_layers_is_identity() {
    let cfg = ModelConfig {
        depth: 0,
        ..ModelConfig::toy()
    };
    let model = FloodTransformer::new(cfg).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens = Tensor::from_fn([16, 32], |_| rng.gen_range(-1.0..1.0));
    let x = tape.constant(tokens.clone());
    let z = model.encode(&mut tape, &p, x).unwrap();
    assert_eq!(tape.value(z), &tokens);
}

#[test]
fn encode_is_permutation_equivariant() {
    let cfg = ModelConfig {
        image_height: 16,
        image_width: 16,
        ..ModelConfig::toy()
    };
    let model = FloodTransformer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens = Tensor::from_fn([4, 32], |_| rng.gen_range(-1.0..1.0));
    let perm = [2usize, 0, 3, 1];
    let permuted = Tensor::from_fn([4, 32], |i| tokens.data()[perm[i / 32] * 32 + i % 32]);

    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let a = tape.constant(tokens);
    let b = tape.constant(permuted);
    let za = model.encode(&mut tape, &p, a).unwrap();
    let zb = model.encode(&mut tape, &p, b).unwrap();
    for r in 0..4 {
        for c in 0..32 {
            let expected = tape.value(za).at(&[perm[r], c]);
            assert!((tape.value(zb).at(&[r, c]) - expected).abs() <= 1e-9);
        }
    }
}

#[test]
fn single_token_attention_reduces_to_value_path() {
    let cfg = ModelConfig {
        image_height: 8,
        image_width: 8,
        heads: 1,
        depth: 1,
        ..ModelConfig::toy()
    };
    let model = FloodTransformer::new(cfg).unwrap();
    let block = &model.encoder[0];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let token = Tensor::from_fn([1, 32], |_| rng.gen_range(-1.0..1.0));

    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let x = tape.constant(token);
    let z = model.encode(&mut tape, &p, x).unwrap();

    // x + proj(v(LN(x))) followed by the feed-forward residual.
    let n = block.norm1.apply(&mut tape, &p, x).unwrap();
    let qkv = block.qkv.apply(&mut tape, &p, n).unwrap();
    let v = tape.slice(qkv, 1, 64, 96).unwrap();
    let a = block.proj.apply(&mut tape, &p, v).unwrap();
    let x1 = tape.add(x, a).unwrap();
    let n2 = block.norm2.apply(&mut tape, &p, x1).unwrap();
    let f = block.feed_forward(&mut tape, &p, n2).unwrap();
    let expected = tape.add(x1, f).unwrap();
    assert_eq!(tape.value(z).data(), tape.value(expected).data());
}

#[test]
fn decode_emits_the_three_scales() {
    let model = FloodTransformer::new(ModelConfig::toy()).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let z = tape.constant(Tensor::ones([16, 32]));
    let f = model.decode(&mut tape, &p, z).unwrap();
    assert_eq!(spatial(&tape, f.t0), (4, 4));
    assert_eq!(spatial(&tape, f.t1), (8, 8));
    assert_eq!(spatial(&tape, f.t2), (16, 16));

    let bad = tape.constant(Tensor::ones([15, 32]));
    assert!(matches!(
        model.decode(&mut tape, &p, bad),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn decode_of_zero_sequence_is_zero() {
    let model = FloodTransformer::new(ModelConfig::toy()).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let z = tape.constant(Tensor::zeros([16, 32]));
    let f = model.decode(&mut tape, &p, z).unwrap();
    for t in [f.t0, f.t1, f.t2] {
        assert!(tape.value(t).data().iter().all(|&v| v == 0.0));
    }
}

fn shape_configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig::toy(),
        ModelConfig {
            image_height: 32,
            image_width: 64,
            patch_size: 16,
            depth: 1,
            ..ModelConfig::toy()
        },
        ModelConfig {
            image_height: 48,
            image_width: 24,
            patch_size: 8,
            heads: 2,
            embed_dim: 16,
            ..tiny()
        },
    ]
}

#[test]
fn scale_agreement_across_configs() {
    for cfg in shape_configs() {
        let model = FloodTransformer::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let x = tape.constant(random_image(7, cfg.image_height, cfg.image_width));
        let out = model.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.transformer.z_l), &[cfg.num_patches(), cfg.embed_dim]);
        let t = [out.transformer.t0, out.transformer.t1, out.transformer.t2];
        let v = [out.cnn.v0, out.cnn.v1, out.cnn.v2];
        for i in 0..3 {
            let want = cfg.scale_size(i);
            assert_eq!(spatial(&tape, t[i]), want);
            assert_eq!(spatial(&tape, v[i]), want);
            assert_eq!(spatial(&tape, out.aux.as_array()[i]), want);
        }
        assert_eq!(tape.shape(out.logits), &[1, cfg.image_height, cfg.image_width]);
        for a in out.aux_logits {
            assert_eq!(tape.shape(a), &[1, cfg.image_height, cfg.image_width]);
        }
        assert!(tape.value(out.logits).is_finite());
    }
}

#[test]
fn residual_block_with_identity_skip_downsamples() {
    let cfg = ModelConfig {
        cnn_channels: [3, 3, 3],
        ..ModelConfig::toy()
    };
    let mut model = FloodTransformer::new(cfg).unwrap();
    zero_params(&mut model, "cnn.block0.conv");
    zero_params(&mut model, "cnn.block0.skip");
    let skip = model.params.get_mut("cnn.block0.skip.kernel").unwrap();
    for c in 0..3 {
        skip.data_mut()[c * 3 + c] = 1.0;
    }
    let img = random_image(8, 32, 32);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let x = tape.constant(img.clone());
    let f = model.cnn_branch(&mut tape, &p, x).unwrap();
    let v2 = tape.value(f.v2);
    assert_eq!(v2.shape(), &[3, 16, 16]);
    for c in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(v2.at(&[c, y, x]), img.at(&[c, 2 * y, 2 * x]));
            }
        }
    }
}

#[test]
fn hadamard_term_is_annihilated_by_zero_cnn_features() {
    let model = FloodTransformer::new(ModelConfig::toy()).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = tape.constant(Tensor::from_fn([16, 4, 4], |_| rng.gen_range(-1.0..1.0)));
    let v = tape.constant(Tensor::zeros([16, 4, 4]));
    let b = model.fusion[0].hadamard_term(&mut tape, &p, t, v).unwrap();
    assert!(tape.value(b).data().iter().all(|&x| x == 0.0));
    let conv = model.fusion[0]
        .interaction_conv
        .apply(&mut tape, &p, b)
        .unwrap();
    assert!(tape.value(conv).data().iter().all(|&x| x == 0.0));
}

#[test]
fn hadamard_term_with_identity_projections_squares() {
    let cfg = ModelConfig {
        decoder_channels: [2, 12, 8],
        cnn_channels: [2, 12, 8],
        fusion_channels: [2, 12, 8],
        ..ModelConfig::toy()
    };
    let mut model = FloodTransformer::new(cfg).unwrap();
    let eye = Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    model.params.set("fusion0.w1.kernel", eye.clone()).unwrap();
    model.params.set("fusion0.w2.kernel", eye).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tv = Tensor::from_fn([2, 4, 4], |_| rng.gen_range(-2.0..2.0));
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let t = tape.constant(tv.clone());
    let b = model.fusion[0].hadamard_term(&mut tape, &p, t, t).unwrap();
    let expected: Vec<f64> = tv.data().iter().map(|x| x * x).collect();
    assert_eq!(tape.value(b).data(), expected.as_slice());
}

// ------------------------------------------------------------ scalar fusion oracle

fn ref_conv(x: &[f64], c_in: usize, h: usize, w: usize, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c_out, ks) = (k.shape()[0], k.shape()[2]);
    let pad = (ks / 2) as isize;
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[o];
                for c in 0..c_in {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(c * h + iy as usize) * w + ix as usize]
                                * k.at(&[o, c, ky, kx]);
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ref_bifuse(params: &Params, prefix: &str, t: &Tensor, v: &Tensor) -> Vec<f64> {
    let get = |n: &str| params.get(&format!("{prefix}.{n}")).unwrap();
    let (ct, h, w) = t.chw().unwrap();
    let (cv, _, _) = v.chw().unwrap();
    let hw = h * w;

    let pooled: Vec<f64> = (0..ct)
        .map(|c| t.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let (w1, b1) = (get("gate_fc1.weight"), get("gate_fc1.bias"));
    let hidden_n = b1.numel();
    let hidden: Vec<f64> = (0..hidden_n)
        .map(|j| {
            let s: f64 = (0..ct).map(|c| pooled[c] * w1.at(&[c, j])).sum();
            (s + b1.data()[j]).max(0.0)
        })
        .collect();
    let (w2, b2) = (get("gate_fc2.weight"), get("gate_fc2.bias"));
    let gate: Vec<f64> = (0..ct)
        .map(|c| sig((0..hidden_n).map(|j| hidden[j] * w2.at(&[j, c])).sum::<f64>() + b2.data()[c]))
        .collect();
    let t_hat: Vec<f64> = (0..ct * hw).map(|i| t.data()[i] * gate[i / hw]).collect();

    let mut pooled_map = vec![0.0; 2 * hw];
    for p in 0..hw {
        let vals: Vec<f64> = (0..cv).map(|c| v.data()[c * hw + p]).collect();
        pooled_map[p] = vals.iter().sum::<f64>() / cv as f64;
        pooled_map[hw + p] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let s = ref_conv(&pooled_map, 2, h, w, get("spatial.kernel"), get("spatial.bias"));
    let v_hat: Vec<f64> = (0..cv * hw).map(|i| v.data()[i] * sig(s[i % hw])).collect();

    let a = ref_conv(t.data(), ct, h, w, get("w1.kernel"), get("w1.bias"));
    let b = ref_conv(v.data(), cv, h, w, get("w2.kernel"), get("w2.bias"));
    let cb = a.len() / hw;
    let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let b_hat: Vec<f64> = ref_conv(&prod, cb, h, w, get("interaction.kernel"), get("interaction.bias"))
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();

    let cat: Vec<f64> = t_hat.into_iter().chain(v_hat).chain(b_hat).collect();
    let cc = ct + cv + cb;
    let r1: Vec<f64> = ref_conv(&cat, cc, h, w, get("res_conv1.kernel"), get("res_conv1.bias"))
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();
    let co = r1.len() / hw;
    let r2 = ref_conv(&r1, co, h, w, get("res_conv2.kernel"), get("res_conv2.bias"));
    let sk = ref_conv(&cat, cc, h, w, get("res_skip.kernel"), get("res_skip.bias"));
    r2.iter().zip(&sk).map(|(x, y)| (x + y).max(0.0)).collect()
}

#[test]
fn bifuse_matches_scalar_reference() {
    let cfg = ModelConfig {
        decoder_channels: [2, 12, 8],
        cnn_channels: [2, 12, 8],
        fusion_channels: [3, 12, 8],
        ..ModelConfig::toy()
    };
    let mut model = FloodTransformer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (name, t) in model.params.names().to_vec().iter().zip(model.params.tensors_mut()) {
        if name.starts_with("fusion0.") && name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    for trial in 0..5 {
        let tv = Tensor::from_fn([2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let vv = Tensor::from_fn([2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let t = tape.constant(tv.clone());
        let v = tape.constant(vv.clone());
        let f = model.bifuse(&mut tape, &p, t, v, 0).unwrap();
        let expected = ref_bifuse(model.params(), "fusion0", &tv, &vv);
        assert_eq!(tape.shape(f), &[3, 4, 4]);
        for (a, b) in tape.value(f).data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn bifuse_rejects_spatial_mismatch() {
    let model = FloodTransformer::new(ModelConfig::toy()).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let t = tape.constant(Tensor::ones([16, 4, 4]));
    let v = tape.constant(Tensor::ones([16, 8, 8]));
    assert!(matches!(
        model.bifuse(&mut tape, &p, t, v, 0),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(model.bifuse(&mut tape, &p, t, t, 3).is_err());
}

#[test]
fn predict_of_zero_network_is_half_everywhere() {
    let mut model = FloodTransformer::new(ModelConfig::toy()).unwrap();
    zero_params(&mut model, "head.");
    let cfg = model.config().clone();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let maps = [0, 1, 2].map(|i| {
        let (h, w) = cfg.scale_size(i);
        tape.constant(Tensor::zeros([cfg.fusion_channels[i], h, w]))
    });
    let f = FusionMaps {
        f0: maps[0],
        f1: maps[1],
        f2: maps[2],
    };
    let logits = model.predict(&mut tape, &p, &f).unwrap();
    let probs = tape.sigmoid(logits);
    assert!(tape.value(probs).data().iter().all(|&v| v == 0.5));

    let swapped = FusionMaps {
        f0: maps[1],
        f1: maps[0],
        f2: maps[2],
    };
    assert!(matches!(
        model.predict(&mut tape, &p, &swapped),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn forward_on_toy_config_is_deterministic() {
    let img = random_image(13, 32, 32);
    let a = FloodTransformer::new(ModelConfig::toy()).unwrap();
    let b = FloodTransformer::new(ModelConfig::toy()).unwrap();
    let la = a.logits(&img).unwrap();
    let lb = b.logits(&img).unwrap();
    assert_eq!(la.shape(), &[1, 32, 32]);
    assert!(la.is_finite());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&la), bits(&lb));
    let other = FloodTransformer::new(ModelConfig {
        seed: 1,
        ..ModelConfig::toy()
    })
    .unwrap();
    assert_ne!(bits(&la), bits(&other.logits(&img).unwrap()));
}

#[test]
fn forward_is_finite_on_extreme_inputs() {
    let model = FloodTransformer::new(tiny()).unwrap();
    for scale in [0.0, 1.0, 1e3] {
        let img = Tensor::from_fn([3, 16, 16], |i| scale * ((i % 7) as f64 - 3.0));
        assert!(model.logits(&img).unwrap().is_finite());
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    let model = FloodTransformer::new(tiny()).unwrap();
    let img = random_image(14, 16, 16);
    let target = Tensor::from_fn([1, 16, 16], |i| ((i / 16 + i % 16) % 5 < 2) as u8 as f64);
    let build = |tape: &mut Tape, vars: &[Var]| -> crate::Result<Var> {
        let x = tape.constant(img.clone());
        // re-wrap the probed tensors as a Bound in store order
        let p = Bound::from_vars(vars.to_vec());
        let out = model.forward(tape, &p, x)?;
        let mut loss = tape.bce_with_logits(out.logits, &target)?;
        for a in out.aux_logits {
            let l = tape.bce_with_logits(a, &target)?;
            loss = tape.add(loss, l)?;
        }
        Ok(loss)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let report = gradcheck::check(model.params().tensors(), build, 1e-4, |_, _| {
        rng.gen_bool(0.1)
    })
    .unwrap();
    let rate = report.pass_rate(1e-3);
    assert!(report.comparisons.len() > 100);
    assert!(rate >= 0.95, "pass rate {rate}, worst {:?}", report.worst());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = FloodTransformer::new(tiny()).unwrap();
    let mut ck = model.to_checkpoint();
    ck.meta.insert("step".into(), "42".into());
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    let restored = FloodTransformer::from_checkpoint(&back).unwrap();
    let img = random_image(16, 16, 16);
    let bits = |t: Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(
        bits(model.logits(&img).unwrap()),
        bits(restored.logits(&img).unwrap())
    );
}

#[test]
fn checkpoint_rejects_corruption_and_mismatch() {
    let model = FloodTransformer::new(tiny()).unwrap();
    let bytes = model.to_checkpoint().to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());

    let mut ck = model.to_checkpoint();
    ck.tensors.retain(|(n, _)| n != "head.out.bias");
    assert!(matches!(
        FloodTransformer::from_checkpoint(&ck),
        Err(Error::ConfigMismatch(_))
    ));
    let mut ck = model.to_checkpoint();
    ck.config.embed_dim = 16;
    assert!(matches!(
        FloodTransformer::from_checkpoint(&ck),
        Err(Error::ConfigMismatch(_))
    ));
}
