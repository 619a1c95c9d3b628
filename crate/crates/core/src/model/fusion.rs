//! Bi-branch fusion of transformer features `t` and CNN features `v`.
//!
//! ```text
//! t̂ = t ⊙ sigmoid(fc2(relu(fc1(avgpool(t)))))          channel attention
//! v̂ = v ⊙ sigmoid(conv3x3([mean_c(v); max_c(v)]))        spatial attention
//! b̂ = relu(conv3x3((W1·t) ⊙ (W2·v)))                      Hadamard interaction
//! f  = relu(conv3x3(relu(conv3x3(x))) + conv1x1(x)),  x = [t̂; v̂; b̂]
//! ```
//!
//! `W1`, `W2` are 1×1 convolutions with bias. Every convolution preserves the
//! spatial size.

use super::layers::{Conv, Linear};
use super::params::{Bound, Initializer};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct BiFusion {
    pub gate_fc1: Linear,
    pub gate_fc2: Linear,
    pub spatial_conv: Conv,
    pub w1: Conv,
    pub w2: Conv,
    pub interaction_conv: Conv,
    pub res_conv1: Conv,
    pub res_conv2: Conv,
    pub res_skip: Conv,
    t_channels: usize,
}

impl BiFusion {
    pub(crate) fn new(
        init: &mut Initializer,
        name: &str,
        t_channels: usize,
        v_channels: usize,
        out_channels: usize,
    ) -> Self {
        let hidden = (t_channels / 4).max(1);
        let cat = t_channels + v_channels + out_channels;
        BiFusion {
            gate_fc1: Linear::new(init, &format!("{name}.gate_fc1"), t_channels, hidden),
            gate_fc2: Linear::new(init, &format!("{name}.gate_fc2"), hidden, t_channels),
            spatial_conv: Conv::new(init, &format!("{name}.spatial"), 2, 1, 3, 1),
            w1: Conv::new(init, &format!("{name}.w1"), t_channels, out_channels, 1, 1),
            w2: Conv::new(init, &format!("{name}.w2"), v_channels, out_channels, 1, 1),
            interaction_conv: Conv::new(
                init,
                &format!("{name}.interaction"),
                out_channels,
                out_channels,
                3,
                1,
            ),
            res_conv1: Conv::new(init, &format!("{name}.res_conv1"), cat, out_channels, 3, 1),
            res_conv2: Conv::new(
                init,
                &format!("{name}.res_conv2"),
                out_channels,
                out_channels,
                3,
                1,
            ),
            res_skip: Conv::new(init, &format!("{name}.res_skip"), cat, out_channels, 1, 1),
            t_channels,
        }
    }

    pub fn channel_attention(&self, tape: &mut Tape, p: &Bound, t: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(t)?;
        let row = tape.reshape(pooled, vec![1, self.t_channels])?;
        let h = self.gate_fc1.apply(tape, p, row)?;
        let h = tape.relu(h);
        let g = self.gate_fc2.apply(tape, p, h)?;
        let g = tape.sigmoid(g);
        let g = tape.reshape(g, vec![self.t_channels])?;
        tape.scale_channels(t, g)
    }

    pub fn spatial_attention(&self, tape: &mut Tape, p: &Bound, v: Var) -> Result<Var> {
        let mean = tape.channel_mean(v)?;
        let max = tape.channel_max(v)?;
        let pooled = tape.concat(&[mean, max], 0)?;
        let g = self.spatial_conv.apply(tape, p, pooled)?;
        let g = tape.sigmoid(g);
        tape.scale_spatial(v, g)
    }

    /// `(W1·t) ⊙ (W2·v)`, before the interaction conv.
    pub fn hadamard_term(&self, tape: &mut Tape, p: &Bound, t: Var, v: Var) -> Result<Var> {
        let a = self.w1.apply(tape, p, t)?;
        let b = self.w2.apply(tape, p, v)?;
        tape.mul(a, b)
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, t: Var, v: Var) -> Result<Var> {
        let (ts, vs) = (tape.shape(t), tape.shape(v));
        if ts.len() != 3 || vs.len() != 3 || ts[1..] != vs[1..] {
            return Err(Error::shape(
                "bifuse",
                format!("t {ts:?} and v {vs:?} must share spatial size"),
            ));
        }
        let t_hat = self.channel_attention(tape, p, t)?;
        let v_hat = self.spatial_attention(tape, p, v)?;
        let b = self.hadamard_term(tape, p, t, v)?;
        let b_hat = self.interaction_conv.apply_relu(tape, p, b)?;
        let x = tape.concat(&[t_hat, v_hat, b_hat], 0)?;
        let h = self.res_conv1.apply_relu(tape, p, x)?;
        let h = self.res_conv2.apply(tape, p, h)?;
        let s = self.res_skip.apply(tape, p, x)?;
        let y = tape.add(h, s)?;
        Ok(tape.relu(y))
    }
}
