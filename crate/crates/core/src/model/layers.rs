//! Parameterized building blocks. Each layer owns [`ParamId`]s and applies
//! itself to tape values through a [`Bound`] set of parameter handles.

use super::params::{Bound, Initializer, ParamId};
use crate::error::Result;
use crate::tensor::{Tape, Var};

pub(crate) const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new(init: &mut Initializer, name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: init.he_uniform(format!("{name}.weight"), vec![inputs, outputs], inputs),
            bias: init.constant(format!("{name}.bias"), vec![outputs], 0.0),
        }
    }

    /// `x[N×in] · W + b`
    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row_bias(y, p.var(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Square `size×size` convolution; padding keeps the spatial size at stride 1.
    pub(crate) fn new(
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        size: usize,
        stride: usize,
    ) -> Self {
        let fan_in = c_in * size * size;
        Conv {
            kernel: init.he_uniform(
                format!("{name}.kernel"),
                vec![c_out, c_in, size, size],
                fan_in,
            ),
            bias: init.constant(format!("{name}.bias"), vec![c_out], 0.0),
            stride,
            padding: size / 2,
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.kernel), self.stride, self.padding)?;
        tape.add_channel_bias(y, p.var(self.bias))
    }

    pub fn apply_relu(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.apply(tape, p, x)?;
        Ok(tape.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(init: &mut Initializer, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: init.constant(format!("{name}.gamma"), vec![width], 1.0),
            beta: init.constant(format!("{name}.beta"), vec![width], 0.0),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layernorm(x, p.var(self.gamma), p.var(self.beta), LAYERNORM_EPS)
    }
}

/// `relu(conv(relu(conv(x))) + skip(x))` where `skip` is a 1×1 projection.
/// The first conv and the skip carry the block's stride.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Conv,
}

impl ResBlock {
    pub(crate) fn new(
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        ResBlock {
            conv1: Conv::new(init, &format!("{name}.conv1"), c_in, c_out, 3, stride),
            conv2: Conv::new(init, &format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip: Conv::new(init, &format!("{name}.skip"), c_in, c_out, 1, stride),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.apply_relu(tape, p, x)?;
        let h = self.conv2.apply(tape, p, h)?;
        let s = self.skip.apply(tape, p, x)?;
        let y = tape.add(h, s)?;
        Ok(tape.relu(y))
    }
}
