//! The two-branch segmentation network.
//!
//! A vision-transformer branch (patch embedding, `L` pre-norm encoder layers,
//! convolutional decoder) and a shallow three-block residual CNN run in
//! parallel on the same image. Their feature maps meet at three scales
//! (`H/8`, `H/4`, `H/2`) in [`BiFusion`] stages, and the fused maps are merged
//! coarse-to-fine into a full-resolution logit map.

mod checkpoint;
mod config;
mod fusion;
mod layers;
mod params;
mod transformer;

pub use checkpoint::Checkpoint;
pub use config::{parse_kv, ModelConfig};
pub use fusion::BiFusion;
pub use layers::{Conv, LayerNorm, Linear, ResBlock};
pub use params::{Bound, ParamId, Params};
pub use transformer::{Decoder, EncoderBlock, PatchEmbed};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use params::Initializer;

/// Decoder outputs and the encoded token sequence, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct TransformerFeatures {
    /// `C×H/8×W/8`
    pub t0: Var,
    /// `C'×H/4×W/4`
    pub t1: Var,
    /// `C''×H/2×W/2`
    pub t2: Var,
    /// `N×D` encoder output.
    pub z_l: Var,
}

/// CNN branch outputs, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct CnnFeatures {
    pub v0: Var,
    pub v1: Var,
    pub v2: Var,
}

/// Fused maps at the three scales, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct FusionMaps {
    pub f0: Var,
    pub f1: Var,
    pub f2: Var,
}

impl FusionMaps {
    pub fn as_array(&self) -> [Var; 3] {
        [self.f0, self.f1, self.f2]
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `1×H×W` logits of the main head.
    pub logits: Var,
    /// Full-resolution `1×H×W` logits of the deep-supervision heads on `f0, f1, f2`.
    pub aux_logits: [Var; 3],
    pub aux: FusionMaps,
    pub transformer: TransformerFeatures,
    pub cnn: CnnFeatures,
}

/// Three stride-2 residual blocks: image → `v2` (`H/2`) → `v1` (`H/4`) → `v0` (`H/8`).
#[derive(Debug, Clone)]
pub struct CnnBranch {
    pub blocks: [ResBlock; 3],
}

impl CnnBranch {
    fn new(init: &mut Initializer, cfg: &ModelConfig) -> Self {
        let [c0, c1, c2] = cfg.cnn_channels;
        CnnBranch {
            blocks: [
                ResBlock::new(init, "cnn.block0", 3, c2, 2),
                ResBlock::new(init, "cnn.block1", c2, c1, 2),
                ResBlock::new(init, "cnn.block2", c1, c0, 2),
            ],
        }
    }
}

/// Coarse-to-fine merge of the fused maps plus the deep-supervision heads.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub merge1: Conv,
    pub merge2: Conv,
    pub out: Conv,
    pub aux: [Conv; 3],
}

impl PredictionHead {
    fn new(init: &mut Initializer, cfg: &ModelConfig) -> Self {
        let [c0, c1, c2] = cfg.fusion_channels;
        PredictionHead {
            merge1: Conv::new(init, "head.merge1", c0 + c1, c1, 3, 1),
            merge2: Conv::new(init, "head.merge2", c1 + c2, c2, 3, 1),
            out: Conv::new(init, "head.out", c2, 1, 1, 1),
            aux: [
                Conv::new(init, "head.aux0", c0, 1, 1, 1),
                Conv::new(init, "head.aux1", c1, 1, 1, 1),
                Conv::new(init, "head.aux2", c2, 1, 1, 1),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct FloodTransformer {
    config: ModelConfig,
    params: Params,
    pub patch_embed: PatchEmbed,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Decoder,
    pub cnn: CnnBranch,
    pub fusion: [BiFusion; 3],
    pub head: PredictionHead,
}

impl FloodTransformer {
    /// Builds the network with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Params::default();
        let mut init = Initializer {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let patch_embed = PatchEmbed::new(&mut init, &config);
        let encoder = (0..config.depth)
            .map(|i| EncoderBlock::new(&mut init, &format!("encoder.{i}"), &config))
            .collect();
        let decoder = Decoder::new(&mut init, &config);
        let cnn = CnnBranch::new(&mut init, &config);
        let (dc, cc, fc) = (
            config.decoder_channels,
            config.cnn_channels,
            config.fusion_channels,
        );
        let fusion = [0, 1, 2]
            .map(|i| BiFusion::new(&mut init, &format!("fusion{i}"), dc[i], cc[i], fc[i]));
        let head = PredictionHead::new(&mut init, &config);
        Ok(FloodTransformer {
            config,
            params,
            patch_embed,
            encoder,
            decoder,
            cnn,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    fn check_image(&self, tape: &Tape, image: Var) -> Result<()> {
        let want = [3, self.config.image_height, self.config.image_width];
        if tape.shape(image) != want {
            return Err(Error::shape(
                "model input",
                format!("expected image {want:?}, got {:?}", tape.shape(image)),
            ));
        }
        Ok(())
    }

    /// `3×H×W` image to `N×D` tokens (projection plus position embedding).
    pub fn patch_embed(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        self.check_image(tape, image)?;
        self.patch_embed.apply(tape, p, image)
    }

    /// Runs the `L` encoder layers; `L = 0` returns the tokens unchanged.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, tokens: Var) -> Result<Var> {
        let want = [self.config.num_patches(), self.config.embed_dim];
        if tape.shape(tokens) != want {
            return Err(Error::shape(
                "encode",
                format!("expected tokens {want:?}, got {:?}", tape.shape(tokens)),
            ));
        }
        self.encoder
            .iter()
            .try_fold(tokens, |x, block| block.apply(tape, p, x))
    }

    pub fn decode(&self, tape: &mut Tape, p: &Bound, z_l: Var) -> Result<TransformerFeatures> {
        let [t0, t1, t2] = self.decoder.apply(tape, p, z_l)?;
        Ok(TransformerFeatures { t0, t1, t2, z_l })
    }

    pub fn cnn_branch(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<CnnFeatures> {
        self.check_image(tape, image)?;
        let v2 = self.cnn.blocks[0].apply(tape, p, image)?;
        let v1 = self.cnn.blocks[1].apply(tape, p, v2)?;
        let v0 = self.cnn.blocks[2].apply(tape, p, v1)?;
        Ok(CnnFeatures { v0, v1, v2 })
    }

    /// Fuses `t` and `v` with the parameter set of `scale` (0, 1 or 2).
    pub fn bifuse(&self, tape: &mut Tape, p: &Bound, t: Var, v: Var, scale: usize) -> Result<Var> {
        let stage = self
            .fusion
            .get(scale)
            .ok_or_else(|| Error::InvalidParam(format!("fusion scale {scale} not in 0..3")))?;
        stage.apply(tape, p, t, v)
    }

    /// Merges `f0 → f1 → f2` and upsamples to a `1×H×W` logit map.
    pub fn predict(&self, tape: &mut Tape, p: &Bound, f: &FusionMaps) -> Result<Var> {
        for (i, var) in f.as_array().into_iter().enumerate() {
            let (h, w) = self.config.scale_size(i);
            let s = tape.shape(var);
            if s.len() != 3 || s[1..] != [h, w] {
                return Err(Error::shape(
                    "predict",
                    format!("fusion map {i} is {s:?}, expected spatial {h}×{w}"),
                ));
            }
        }
        let up = tape.upsample_bilinear(f.f0, 2)?;
        let x = tape.concat(&[up, f.f1], 0)?;
        let g1 = self.head.merge1.apply_relu(tape, p, x)?;
        let up = tape.upsample_bilinear(g1, 2)?;
        let x = tape.concat(&[up, f.f2], 0)?;
        let g2 = self.head.merge2.apply_relu(tape, p, x)?;
        let logits = self.head.out.apply(tape, p, g2)?;
        tape.upsample_bilinear(logits, 2)
    }

    /// Deep-supervision logits, each upsampled to `1×H×W`.
    pub fn aux_logits(&self, tape: &mut Tape, p: &Bound, f: &FusionMaps) -> Result<[Var; 3]> {
        let maps = f.as_array();
        let mut out = maps;
        for i in 0..3 {
            let l = self.head.aux[i].apply(tape, p, maps[i])?;
            out[i] = tape.upsample_bilinear(l, 8 >> i)?;
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Forward> {
        let tokens = self.patch_embed(tape, p, image)?;
        let z_l = self.encode(tape, p, tokens)?;
        let transformer = self.decode(tape, p, z_l)?;
        let cnn = self.cnn_branch(tape, p, image)?;
        let aux = FusionMaps {
            f0: self.bifuse(tape, p, transformer.t0, cnn.v0, 0)?,
            f1: self.bifuse(tape, p, transformer.t1, cnn.v1, 1)?,
            f2: self.bifuse(tape, p, transformer.t2, cnn.v2, 2)?,
        };
        let logits = self.predict(tape, p, &aux)?;
        let aux_logits = self.aux_logits(tape, p, &aux)?;
        Ok(Forward {
            logits,
            aux_logits,
            aux,
            transformer,
            cnn,
        })
    }

    /// Inference-only forward pass returning the `1×H×W` logits.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            meta: Default::default(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the network from a checkpoint. Every parameter the config
    /// implies must be present with the right shape; extra tensors are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = FloodTransformer::new(ck.config.clone())
            .map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        for name in model.params.names().to_vec() {
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter `{name}`")))?;
            model.params.set(&name, t.clone())?;
        }
        Ok(model)
    }
}

/// Anything that maps a `3×H×W` image in `[0,1]` to `1×H×W` water probabilities.
pub trait Segmenter {
    /// Expected `(height, width)` of input images.
    fn input_size(&self) -> (usize, usize);

    fn probabilities(&self, image: &Tensor) -> Result<Tensor>;
}

impl Segmenter for FloodTransformer {
    fn input_size(&self) -> (usize, usize) {
        (self.config.image_height, self.config.image_width)
    }

    fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        let mut logits = self.logits(image)?;
        for v in logits.data_mut() {
            *v = crate::tensor::kernels::sigmoid(*v);
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests;
