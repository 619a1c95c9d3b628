use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations selectable at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    /// Hadamard product.
    Mul,
    Relu,
    Gelu,
    Sigmoid,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Mul)
    }
}

/// Computes the gradient for each input given the input values, the output
/// value and the output gradient. Inputs whose `need` flag is false may get
/// `None`.
type BackwardFn =
    Box<dyn Fn(&[&Tensor], &Tensor, &[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Records operations in execution order so they can be replayed in reverse.
///
/// Nodes are appended only after their inputs exist, so the node vector is
/// always in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` is a leaf that
    /// required a gradient and the loss depends on it.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(var.0)?.as_ref()?.grad()
    }

    /// The leaf tensor behind `var` with its `grad` populated.
    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0)?.as_ref()
    }

    pub fn take_leaf(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.get_mut(var.0)?.take()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("expected a matrix, got {:?}", t.shape()),
        )),
    }
}

fn rank3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    t.chw().map_err(|_| {
        Error::shape(op, format!("expected a C×H×W tensor, got {:?}", t.shape()))
    })
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced a consistent shape")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            inputs: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let inputs: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            inputs,
            backward: needs_grad.then_some(backward),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Consumes the tape and back-propagates from a single-element `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let mut nodes = self.nodes;
        let loss_node = nodes
            .get(loss.0)
            .ok_or_else(|| Error::InvalidParam("loss is not on this tape".into()))?;
        if loss_node.value.numel() != 1 {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].needs_grad {
                continue;
            }
            match &nodes[i].backward {
                Some(backward) => {
                    let node = &nodes[i];
                    let inputs: Vec<&Tensor> =
                        node.inputs.iter().map(|&j| &nodes[j].value).collect();
                    let need: Vec<bool> =
                        node.inputs.iter().map(|&j| nodes[j].needs_grad).collect();
                    let input_grads = backward(&inputs, &node.value, &g, &need);
                    for ((&j, gj), need) in node.inputs.iter().zip(input_grads).zip(need) {
                        let (true, Some(gj)) = (need, gj) else { continue };
                        match &mut grads[j] {
                            Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(gj),
                        }
                    }
                }
                None => {
                    let mut leaf = std::mem::replace(&mut nodes[i].value, Tensor::scalar(0.0));
                    leaf.set_grad(g);
                    leaves[i] = Some(leaf);
                }
            }
        }
        Ok(Gradients { leaves })
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {m}×{k} · {k2}×{n}"),
            ));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.record(
            tensor(vec![m, n], out),
            &[a, b],
            Box::new(move |x, _, g, need| {
                vec![
                    need[0].then(|| kernels::matmul_bt(g, x[1].data(), m, n, k)),
                    need[1].then(|| kernels::matmul_at(x[0].data(), g, m, k, n)),
                ]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.value(a))?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        Ok(self.record(
            tensor(vec![c, r], out),
            &[a],
            Box::new(move |_, _, g, _| vec![Some(kernels::transpose(g, c, r))]),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.record(value, &[a], Box::new(|_, _, g, _| vec![Some(g.to_vec())])))
    }

    /// `out[i] = input[index[i]]`; the output takes `shape`.
    pub(crate) fn gather(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(a).data();
        let n = src.len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of {n}")));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.record(
            value,
            &[a],
            Box::new(move |_, _, g, _| {
                let mut gin = vec![0.0; n];
                for (&i, &gv) in index.iter().zip(g) {
                    gin[i] += gv;
                }
                vec![Some(gin)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(Error::EmptyInput("concat needs at least one tensor"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidParam(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let agree = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !agree {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.record(
            tensor(shape, out),
            parts,
            Box::new(move |_, _, g, need| {
                let mut grads: Vec<Vec<f64>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (gp, &len) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[offset..offset + len * inner]);
                        offset += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(need)
                    .map(|(gp, &n)| n.then_some(gp))
                    .collect()
            }),
        ))
    }

    /// Slices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::InvalidParam(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let width = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        Ok(self.record(
            tensor(out_shape, out),
            &[a],
            Box::new(move |_, _, g, _| {
                let mut gin = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    gin[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(gin)]
            }),
        ))
    }

    // ---------------------------------------------------------------- pointwise

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Gelu, None) => Ok(self.gelu(a)),
            (Elementwise::Sigmoid, None) => Ok(self.sigmoid(a)),
            (op, _) => Err(Error::InvalidParam(format!(
                "{op:?} takes {} operand(s)",
                if op.is_binary() { 2 } else { 1 }
            ))),
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        grad: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Var> {
        same_shape(op, self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = x.shape().to_vec();
        Ok(self.record(
            tensor(shape, out),
            &[a, b],
            Box::new(move |x, _, g, need| {
                let (mut ga, mut gb) = (
                    need[0].then(|| vec![0.0; g.len()]),
                    need[1].then(|| vec![0.0; g.len()]),
                );
                for i in 0..g.len() {
                    let (da, db) = grad(x[0].data()[i], x[1].data()[i], g[i]);
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i] = db;
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, |_, _, g| (g, -g))
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, |p, q, g| (g * q, g * p))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |p, q| p / q, |p, q, g| (g / q, -g * p / (q * q)))
    }

    /// Unary map where the derivative is computed from input and output.
    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let x = self.value(a);
        let out = x.data().iter().map(|&v| f(v)).collect();
        let shape = x.shape().to_vec();
        self.record(
            tensor(shape, out),
            &[a],
            Box::new(move |x, y, g, _| {
                let gin = x[0]
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                    .collect();
                vec![Some(gin)]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, |x, _| kernels::gelu_grad(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let out = x.data().iter().map(|v| v * factor).collect();
        let shape = x.shape().to_vec();
        self.record(
            tensor(shape, out),
            &[a],
            Box::new(move |_, _, g, _| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = x.data().iter().map(|v| v + c).collect();
        let shape = x.shape().to_vec();
        self.record(
            tensor(shape, out),
            &[a],
            Box::new(|_, _, g, _| vec![Some(g.to_vec())]),
        )
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let n = self.value(a).numel();
        self.record(
            Tensor::scalar(total),
            &[a],
            Box::new(move |_, _, g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over `H×W` of a `C×H×W` tensor, giving `[C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = rank3("global_avg_pool", self.value(a))?;
        let hw = h * w;
        let out = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.record(
            tensor(vec![c], out),
            &[a],
            Box::new(move |_, _, g, _| {
                let gin = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw))
                    .collect();
                vec![Some(gin)]
            }),
        ))
    }

    /// Mean across channels of a `C×H×W` tensor, giving `1×H×W`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = rank3("channel_mean", self.value(a))?;
        let hw = h * w;
        let x = self.value(a).data();
        let out = (0..hw)
            .map(|p| (0..c).map(|ch| x[ch * hw + p]).sum::<f64>() / c as f64)
            .collect();
        Ok(self.record(
            tensor(vec![1, h, w], out),
            &[a],
            Box::new(move |_, _, g, _| {
                let gin = (0..c * hw).map(|i| g[i % hw] / c as f64).collect();
                vec![Some(gin)]
            }),
        ))
    }

    /// Maximum across channels of a `C×H×W` tensor, giving `1×H×W`. The
    /// gradient flows to the first maximal channel.
    pub fn channel_max(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = rank3("channel_max", self.value(a))?;
        let hw = h * w;
        let x = self.value(a).data();
        let argmax: Vec<usize> = (0..hw)
            .map(|p| {
                (1..c).fold(0, |best, ch| {
                    if x[ch * hw + p] > x[best * hw + p] {
                        ch
                    } else {
                        best
                    }
                })
            })
            .collect();
        let out = argmax.iter().enumerate().map(|(p, &ch)| x[ch * hw + p]).collect();
        Ok(self.record(
            tensor(vec![1, h, w], out),
            &[a],
            Box::new(move |_, _, g, _| {
                let mut gin = vec![0.0; c * hw];
                for (p, &ch) in argmax.iter().enumerate() {
                    gin[ch * hw + p] = g[p];
                }
                vec![Some(gin)]
            }),
        ))
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidParam(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let out = kernels::softmax(self.value(a).data(), outer, len, inner);
        Ok(self.record(
            tensor(shape, out),
            &[a],
            Box::new(move |_, y, g, _| {
                vec![Some(kernels::softmax_grad(y.data(), g, outer, len, inner))]
            }),
        ))
    }

    /// Row-wise layer normalization of an `N×D` matrix with affine `gamma`, `beta` of length `D`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidParam(format!("layernorm eps must be > 0, got {eps}")));
        }
        let (n, d) = rank2("layernorm", self.value(x))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layernorm",
                    format!("affine parameter {:?} for width {d}", self.shape(p)),
                ));
            }
        }
        let normalized = move |xs: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut xhat = vec![0.0; n * d];
            let mut rstd = vec![0.0; n];
            for r in 0..n {
                let row = &xs[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                rstd[r] = 1.0 / (var + eps).sqrt();
                for c in 0..d {
                    xhat[r * d + c] = (row[c] - mu) * rstd[r];
                }
            }
            (xhat, rstd)
        };
        let (xhat, _) = normalized(self.value(x).data());
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i % d] + bv[i % d])
            .collect();
        Ok(self.record(
            tensor(vec![n, d], out),
            &[x, gamma, beta],
            Box::new(move |inp, _, g, need| {
                let (xhat, rstd) = normalized(inp[0].data());
                let gamma = inp[1].data();
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        let dxhat: Vec<f64> =
                            (0..d).map(|c| g[r * d + c] * gamma[c]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 =
                            (0..d).map(|c| dxhat[c] * xhat[r * d + c]).sum();
                        for c in 0..d {
                            gx[r * d + c] = rstd[r] / d as f64
                                * (d as f64 * dxhat[c] - s1 - xhat[r * d + c] * s2);
                        }
                    }
                    gx
                });
                let gg = need[1].then(|| {
                    let mut gg = vec![0.0; d];
                    for (i, (&gv, &xv)) in g.iter().zip(&xhat).enumerate() {
                        gg[i % d] += gv * xv;
                    }
                    gg
                });
                let gb = need[2].then(|| {
                    let mut gb = vec![0.0; d];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                    gb
                });
                vec![gx, gg, gb]
            }),
        ))
    }

    // ---------------------------------------------------------------- spatial

    /// Cross-correlation of a `C_in×H×W` input with a `C_out×C_in×k×k` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidParam("conv2d stride must be positive".into()));
        }
        let (c_in, h, w) = rank3("conv2d", self.value(input))?;
        let kshape = self.shape(kernel).to_vec();
        let [c_out, kc, k, k2] = kshape[..] else {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {kshape:?}")));
        };
        if kc != c_in || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {c_in}×{h}×{w} vs kernel {kshape:?}"),
            ));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}×{w} (pad {padding})"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
        };
        let out = kernels::conv2d(self.value(input).data(), self.value(kernel).data(), geom);
        Ok(self.record(
            tensor(vec![c_out, geom.out_h(), geom.out_w()], out),
            &[input, kernel],
            Box::new(move |x, _, g, need| {
                vec![
                    need[0].then(|| kernels::conv2d_grad_input(g, x[1].data(), geom)),
                    need[1].then(|| kernels::conv2d_grad_kernel(g, x[0].data(), geom)),
                ]
            }),
        ))
    }

    /// Adds `bias[c]` to every pixel of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = rank3("add_channel_bias", self.value(x))?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for {c} channels", self.shape(bias)),
            ));
        }
        let hw = h * w;
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / hw])
            .collect();
        Ok(self.record(
            tensor(vec![c, h, w], out),
            &[x, bias],
            Box::new(move |_, _, g, need| {
                vec![
                    need[0].then(|| g.to_vec()),
                    need[1].then(|| g.chunks(hw).map(|p| p.iter().sum()).collect()),
                ]
            }),
        ))
    }

    /// Adds `bias[j]` to column `j` of every row of an `N×D` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = rank2("add_row_bias", self.value(x))?;
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for width {d}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        Ok(self.record(
            tensor(vec![n, d], out),
            &[x, bias],
            Box::new(move |_, _, g, need| {
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; d];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                    gb
                });
                vec![need[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Multiplies channel `c` of a `C×H×W` tensor by `gate[c]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, h, w) = rank3("scale_channels", self.value(x))?;
        if self.shape(gate) != [c] {
            return Err(Error::shape(
                "scale_channels",
                format!("gate {:?} for {c} channels", self.shape(gate)),
            ));
        }
        let hw = h * w;
        let gv = self.value(gate).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[i / hw])
            .collect();
        Ok(self.record(
            tensor(vec![c, h, w], out),
            &[x, gate],
            Box::new(move |inp, _, g, need| {
                let (xv, gate) = (inp[0].data(), inp[1].data());
                vec![
                    need[0].then(|| g.iter().enumerate().map(|(i, gv)| gv * gate[i / hw]).collect()),
                    need[1].then(|| {
                        (0..c)
                            .map(|ch| {
                                (ch * hw..(ch + 1) * hw).map(|i| g[i] * xv[i]).sum()
                            })
                            .collect()
                    }),
                ]
            }),
        ))
    }

    /// Multiplies every channel of a `C×H×W` tensor by a `1×H×W` map.
    pub fn scale_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, h, w) = rank3("scale_spatial", self.value(x))?;
        if self.shape(gate) != [1, h, w] {
            return Err(Error::shape(
                "scale_spatial",
                format!("gate {:?} for {h}×{w} map", self.shape(gate)),
            ));
        }
        let hw = h * w;
        let gv = self.value(gate).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[i % hw])
            .collect();
        Ok(self.record(
            tensor(vec![c, h, w], out),
            &[x, gate],
            Box::new(move |inp, _, g, need| {
                let (xv, gate) = (inp[0].data(), inp[1].data());
                vec![
                    need[0].then(|| g.iter().enumerate().map(|(i, gv)| gv * gate[i % hw]).collect()),
                    need[1].then(|| {
                        let mut gg = vec![0.0; hw];
                        for (i, (gv, xv)) in g.iter().zip(xv).enumerate() {
                            gg[i % hw] += gv * xv;
                        }
                        gg
                    }),
                ]
            }),
        ))
    }

    /// Bilinear upsampling of a `C×H×W` tensor by an integer factor
    /// (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidParam("upsample factor must be ≥ 1".into()));
        }
        let (c, h, w) = rank3("upsample_bilinear", self.value(x))?;
        if factor == 1 {
            return self.reshape(x, vec![c, h, w]);
        }
        let out = kernels::upsample_bilinear(self.value(x).data(), c, h, w, factor);
        Ok(self.record(
            tensor(vec![c, h * factor, w * factor], out),
            &[x],
            Box::new(move |_, _, g, _| {
                vec![Some(kernels::upsample_bilinear_grad(g, c, h, w, factor))]
            }),
        ))
    }

    /// Cuts a `C×H×W` image into non-overlapping `patch×patch` tiles, one row
    /// per tile in raster order; each row lists the tile's pixels channel-major.
    pub fn patchify(&mut self, image: Var, patch: usize) -> Result<Var> {
        let (c, h, w) = rank3("patchify", self.value(image))?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(
                "patchify",
                format!("{h}×{w} image is not tiled by {patch}×{patch} patches"),
            ));
        }
        let (gh, gw) = (h / patch, w / patch);
        let row_len = c * patch * patch;
        let mut index = Vec::with_capacity(gh * gw * row_len);
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            index.push((ch * h + py * patch + dy) * w + px * patch + dx);
                        }
                    }
                }
            }
        }
        self.gather(image, index, vec![gh * gw, row_len])
    }

    // ---------------------------------------------------------------- losses

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// computed from the logits without forming probabilities.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        same_shape("bce_with_logits", self.value(logits), target)?;
        let n = target.numel() as f64;
        let x = self.value(logits).data();
        let total: f64 = x
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| kernels::softplus(z) - t * z)
            .sum();
        let t = target.data().to_vec();
        Ok(self.record(
            Tensor::scalar(total / n),
            &[logits],
            Box::new(move |x, _, g, _| {
                let gin = x[0]
                    .data()
                    .iter()
                    .zip(&t)
                    .map(|(&z, &tv)| g[0] * (kernels::sigmoid(z) - tv) / n)
                    .collect();
                vec![Some(gin)]
            }),
        ))
    }
}
