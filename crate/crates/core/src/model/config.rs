use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// Channel lists are indexed by scale: entry 0 belongs to the coarsest maps
/// (`H/8`), entry 2 to the finest (`H/2`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Patch edge length `F`; a multiple of 8.
    pub patch_size: usize,
    /// Number of encoder layers `L`.
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Width of the encoder feed-forward hidden layer.
    pub mlp_hidden: usize,
    /// Channels of the transformer decoder outputs `t0, t1, t2`.
    pub decoder_channels: [usize; 3],
    /// Channels of the CNN outputs `v0, v1, v2`.
    pub cnn_channels: [usize; 3],
    /// Channels of the fused maps `f0, f1, f2`.
    pub fusion_channels: [usize; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 256,
            image_width: 256,
            patch_size: 16,
            depth: 4,
            heads: 4,
            embed_dim: 64,
            mlp_hidden: 128,
            decoder_channels: [48, 32, 16],
            cnn_channels: [48, 32, 16],
            fusion_channels: [32, 24, 16],
            seed: 0,
        }
    }
}

/// Keys of the `key=value` text form, in write order.
const KEYS: [&str; 11] = [
    "image_height",
    "image_width",
    "patch_size",
    "depth",
    "heads",
    "embed_dim",
    "mlp_hidden",
    "decoder_channels",
    "cnn_channels",
    "fusion_channels",
    "seed",
];

impl ModelConfig {
    /// Small configuration used by the tests, the demo and the CLI defaults:
    /// 32×32 input, 8×8 patches, two encoder layers, four heads, width 32.
    pub fn toy() -> Self {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            depth: 2,
            heads: 4,
            embed_dim: 32,
            mlp_hidden: 64,
            decoder_channels: [16, 12, 8],
            cnn_channels: [16, 12, 8],
            fusion_channels: [16, 12, 8],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        let (h, w, f) = (self.image_height, self.image_width, self.patch_size);
        if h == 0 || w == 0 {
            return bad(format!("image size {h}×{w} must be positive"));
        }
        if f == 0 || f % 8 != 0 {
            return bad(format!("patch size {f} must be a positive multiple of 8"));
        }
        if h % f != 0 || w % f != 0 {
            return bad(format!("image size {h}×{w} is not divisible by patch size {f}"));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return bad(format!("image size {h}×{w} is not divisible by 8"));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        let channels = self
            .decoder_channels
            .iter()
            .chain(&self.cnn_channels)
            .chain(&self.fusion_channels);
        if self.mlp_hidden == 0 || channels.into_iter().any(|&c| c == 0) {
            return bad("hidden widths and channel counts must be positive".into());
        }
        Ok(())
    }

    /// Token count `N = (H/F)·(W/F)`.
    pub fn num_patches(&self) -> usize {
        self.grid().0 * self.grid().1
    }

    /// Patch grid `(H/F, W/F)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Spatial size at fusion scale `i`: `(H,W)/8`, `/4`, `/2` for `i = 0, 1, 2`.
    pub fn scale_size(&self, i: usize) -> (usize, usize) {
        let div = 8 >> i;
        (self.image_height / div, self.image_width / div)
    }

    pub fn to_kv(&self) -> String {
        let list = |c: &[usize; 3]| format!("{},{},{}", c[0], c[1], c[2]);
        let values = [
            self.image_height.to_string(),
            self.image_width.to_string(),
            self.patch_size.to_string(),
            self.depth.to_string(),
            self.heads.to_string(),
            self.embed_dim.to_string(),
            self.mlp_hidden.to_string(),
            list(&self.decoder_channels),
            list(&self.cnn_channels),
            list(&self.fusion_channels),
            self.seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Parses the fields this type knows from a key/value map. Missing keys
    /// are an error; unknown keys are ignored.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::format("model config", format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .trim()
                .parse()
                .map_err(|_| Error::format("model config", format!("`{k}` is not an integer")))
        };
        let list = |k: &str| -> Result<[usize; 3]> {
            let parts: Vec<usize> = get(k)?
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("model config", format!("`{k}` is not a list")))?;
            parts
                .try_into()
                .map_err(|_| Error::format("model config", format!("`{k}` needs 3 entries")))
        };
        let cfg = ModelConfig {
            image_height: num("image_height")? as usize,
            image_width: num("image_width")? as usize,
            patch_size: num("patch_size")? as usize,
            depth: num("depth")? as usize,
            heads: num("heads")? as usize,
            embed_dim: num("embed_dim")? as usize,
            mlp_hidden: num("mlp_hidden")? as usize,
            decoder_channels: list("decoder_channels")?,
            cnn_channels: list("cnn_channels")?,
            fusion_channels: list("fusion_channels")?,
            seed: num("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("key=value text", format!("line {}: `{line}`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
