//! Transformer branch: patch embedding, pre-norm encoder, convolutional decoder.

use super::config::ModelConfig;
use super::layers::{Conv, LayerNorm, Linear};
use super::params::{Bound, Initializer, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub position: ParamId,
    patch: usize,
}

impl PatchEmbed {
    pub(crate) fn new(init: &mut Initializer, cfg: &ModelConfig) -> Self {
        let patch_len = 3 * cfg.patch_size * cfg.patch_size;
        PatchEmbed {
            proj: Linear::new(init, "patch.proj", patch_len, cfg.embed_dim),
            position: init.uniform(
                "patch.position".into(),
                vec![cfg.num_patches(), cfg.embed_dim],
                0.02,
            ),
            patch: cfg.patch_size,
        }
    }

    /// `3×H×W` image to `N×D` tokens.
    pub fn apply(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        let patches = tape.patchify(image, self.patch)?;
        let tokens = self.proj.apply(tape, p, patches)?;
        tape.add(tokens, p.var(self.position))
    }
}

/// Pre-norm block: `x + MSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    /// Joint projection to `[q | k | v]`, each `D` wide.
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    heads: usize,
    dim: usize,
}

impl EncoderBlock {
    pub(crate) fn new(init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        EncoderBlock {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d),
            qkv: Linear::new(init, &format!("{name}.qkv"), d, 3 * d),
            proj: Linear::new(init, &format!("{name}.proj"), d, d),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d),
            fc1: Linear::new(init, &format!("{name}.fc1"), d, cfg.mlp_hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), cfg.mlp_hidden, d),
            heads: cfg.heads,
            dim: d,
        }
    }

    /// Multi-head self-attention over the rows of `x` (no residual).
    pub fn attention(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let qkv = self.qkv.apply(tape, p, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.slice(qkv, 1, h * dh, (h + 1) * dh)?;
            let k = tape.slice(qkv, 1, self.dim + h * dh, self.dim + (h + 1) * dh)?;
            let v = tape.slice(qkv, 1, 2 * self.dim + h * dh, 2 * self.dim + (h + 1) * dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(weights, v)?);
        }
        let joined = tape.concat(&outs, 1)?;
        self.proj.apply(tape, p, joined)
    }

    pub fn feed_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.apply(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.apply(tape, p, h)
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = self.norm1.apply(tape, p, x)?;
        let a = self.attention(tape, p, n)?;
        let x = tape.add(x, a)?;
        let n = self.norm2.apply(tape, p, x)?;
        let f = self.feed_forward(tape, p, n)?;
        tape.add(x, f)
    }
}

/// Reshapes `z^L` onto the patch grid and recovers `t0` (`H/8`), `t1` (`H/4`)
/// and `t2` (`H/2`) through (bilinear upsample, 3×3 conv, ReLU) stages.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub stages: [Conv; 3],
    grid: (usize, usize),
    dim: usize,
    /// Upsampling factor of the first stage, `F/8`.
    first_factor: usize,
}

impl Decoder {
    pub(crate) fn new(init: &mut Initializer, cfg: &ModelConfig) -> Self {
        let c = cfg.decoder_channels;
        Decoder {
            stages: [
                Conv::new(init, "decoder.stage0", cfg.embed_dim, c[0], 3, 1),
                Conv::new(init, "decoder.stage1", c[0], c[1], 3, 1),
                Conv::new(init, "decoder.stage2", c[1], c[2], 3, 1),
            ],
            grid: cfg.grid(),
            dim: cfg.embed_dim,
            first_factor: cfg.patch_size / 8,
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<[Var; 3]> {
        let (gh, gw) = self.grid;
        if tape.shape(z) != [gh * gw, self.dim] {
            return Err(Error::shape(
                "decode",
                format!(
                    "expected {}×{} tokens, got {:?}",
                    gh * gw,
                    self.dim,
                    tape.shape(z)
                ),
            ));
        }
        let zt = tape.transpose(z)?;
        let grid = tape.reshape(zt, vec![self.dim, gh, gw])?;
        let mut x = grid;
        let mut outs = [grid; 3];
        for (i, stage) in self.stages.iter().enumerate() {
            let factor = if i == 0 { self.first_factor } else { 2 };
            let up = tape.upsample_bilinear(x, factor)?;
            x = stage.apply_relu(tape, p, up)?;
            outs[i] = x;
        }
        Ok(outs)
    }
}
