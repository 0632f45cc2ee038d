use std::fmt;

use super::kernels::{self, ConvGeom};
use super::tensor::{strides, Tensor};
use super::DiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation whose forward kernel lives outside this module.
///
/// `backward` returns one entry per input; `None` means no gradient flows into
/// that input.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor)
        -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d(ConvGeom),
    ConvT2d(ConvGeom),
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize>, count: usize },
    Exp,
    Ln,
    Softplus,
    Tanh,
    Sigmoid,
    Relu,
    Scale(f64),
    AddScalar,
    Clamp { lo: f64, hi: f64 },
    Broadcast,
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    Reshape,
    Custom(Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Define-by-run recording of a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is its own topological
/// order. A tape supports one backward pass; call [`Tape::reset_grads`] before
/// running another.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last backward pass, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push("param", Op::Leaf, vec![], value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push("constant", Op::Leaf, vec![], value, false)
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op,
        parents: Vec<usize>,
        value: Tensor,
        leaf_grad: bool,
    ) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let requires_grad = leaf_grad || parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", Op::Add, vec![a.0, b.0], out, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub, vec![a.0, b.0], out, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul, vec![a.0, b.0], out, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n, false, false);
        let out = Tensor::new(&[m, n], data)?;
        self.push("matmul", Op::MatMul, vec![a.0, b.0], out, false)
    }

    fn conv_geom(
        &self,
        op: &'static str,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom, DiffError> {
        let (ti, tw) = (self.value(input), self.value(weight));
        if ti.rank() != 4 || tw.rank() != 4 || stride == 0 {
            return Err(mismatch(op, ti, tw));
        }
        let (n, c_in, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (w_in, c_out) = if transposed {
            (tw.shape()[0], tw.shape()[1])
        } else {
            (tw.shape()[1], tw.shape()[0])
        };
        if w_in != c_in {
            return Err(mismatch(op, ti, tw));
        }
        let (kh, kw) = (tw.shape()[2], tw.shape()[3]);
        let (out_h, out_w) = if transposed {
            let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
            let ow = ((w - 1) * stride + kw).checked_sub(2 * pad);
            match (oh, ow) {
                (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
                _ => return Err(mismatch(op, ti, tw)),
            }
        } else {
            if h + 2 * pad < kh || w + 2 * pad < kw {
                return Err(mismatch(op, ti, tw));
            }
            ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
        };
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [c_out] {
                return Err(mismatch(op, tw, tb));
            }
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// 2-D convolution of `[n, c_in, h, w]` with `[c_out, c_in, kh, kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let g = self.conv_geom("conv2d", input, weight, bias, stride, pad, false)?;
        let data = kernels::conv2d_forward(
            &g,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[g.n, g.c_out, g.out_h, g.out_w], data)?;
        let mut parents = vec![input.0, weight.0];
        parents.extend(bias.map(|b| b.0));
        self.push("conv2d", Op::Conv2d(g), parents, out, false)
    }

    /// Transposed 2-D convolution with weight `[c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let g = self.conv_geom("conv_transpose2d", input, weight, bias, stride, pad, true)?;
        let data = kernels::conv_transpose2d_forward(
            &g,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[g.n, g.c_out, g.out_h, g.out_w], data)?;
        let mut parents = vec![input.0, weight.0];
        parents.extend(bias.map(|b| b.0));
        self.push("conv_transpose2d", Op::ConvT2d(g), parents, out, false)
    }

    fn reduce(&self, op: &'static str, x: Var, axes: &[usize]) -> Result<(Vec<usize>, Tensor), DiffError> {
        let t = self.value(x);
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= t.rank()) {
            return Err(DiffError::Axis {
                op,
                axis: *axes.last().unwrap_or(&0),
                shape: t.shape().to_vec(),
            });
        }
        let kept: Vec<usize> = (0..t.rank()).filter(|a| !axes.contains(a)).collect();
        let mut out_shape: Vec<usize> = kept.iter().map(|&a| t.shape()[a]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let map = reduce_map(t.shape(), &axes);
        let mut out = Tensor::zeros(&out_shape);
        for (i, &v) in t.data().iter().enumerate() {
            out.data_mut()[map[i]] += v;
        }
        Ok((axes, out))
    }

    /// Sums over `axes`, removing them from the shape (all axes → shape `[1]`).
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var, DiffError> {
        let (axes, out) = self.reduce("sum", x, axes)?;
        self.push("sum", Op::Sum { axes }, vec![x.0], out, false)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, DiffError> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum(x, &axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var, DiffError> {
        let (axes, mut out) = self.reduce("mean", x, axes)?;
        let count: usize = axes.iter().map(|&a| self.value(x).shape()[a]).product();
        let inv = 1.0 / count as f64;
        out.data_mut().iter_mut().for_each(|v| *v *= inv);
        self.push("mean", Op::Mean { axes, count }, vec![x.0], out, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, DiffError> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.mean(x, &axes)
    }

    fn unary(&mut self, name: &'static str, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let out = self.value(x).map(f);
        self.push(name, op, vec![x.0], out, false)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("exp", Op::Exp, x, f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("ln", Op::Ln, x, f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("softplus", Op::Softplus, x, softplus)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("tanh", Op::Tanh, x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("sigmoid", Op::Sigmoid, x, sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("relu", Op::Relu, x, |v| v.max(0.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        self.unary("scale", Op::Scale(c), x, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        self.unary("add_scalar", Op::AddScalar, x, |v| v + c)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.unary("clamp", Op::Clamp { lo, hi }, x, |v| v.clamp(lo, hi))
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn broadcast(&mut self, x: Var, n: usize) -> Result<Var, DiffError> {
        let t = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(n * t.numel());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&shape, data)?;
        self.push("broadcast", Op::Broadcast, vec![x.0], out, false)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = self.value(*xs.first().ok_or(DiffError::Empty { op: "concat" })?);
        if axis >= first.rank() {
            return Err(DiffError::Axis {
                op: "concat",
                axis,
                shape: first.shape().to_vec(),
            });
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            let compatible = t.rank() == first.rank()
                && (0..t.rank()).all(|a| a == axis || t.shape()[a] == first.shape()[a]);
            if !compatible {
                return Err(mismatch("concat", first, t));
            }
            sizes.push(t.shape()[axis]);
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut shape = first.shape().to_vec();
        shape[axis] = sizes.iter().sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (&x, &s) in xs.iter().zip(&sizes) {
                let d = self.value(x).data();
                data.extend_from_slice(&d[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let parents = xs.iter().map(|v| v.0).collect();
        self.push("concat", Op::Concat { axis, sizes }, parents, out, false)
    }

    /// Selects `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, DiffError> {
        let t = self.value(x);
        if axis >= t.rank() || start >= end || end > t.shape()[axis] {
            return Err(DiffError::Slice {
                axis,
                start,
                end,
                shape: t.shape().to_vec(),
            });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let dim = t.shape()[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * dim + start) * inner..(o * dim + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let out = Tensor::new(&shape, data)?;
        self.push("slice", Op::Slice { axis, start }, vec![x.0], out, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = t.reshape(shape)?;
        self.push("reshape", Op::Reshape, vec![x.0], out, false)
    }

    /// Records an externally computed `output` with a custom backward rule.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var, DiffError> {
        let name = op.name();
        self.push(name, Op::Custom(op), inputs.iter().map(|v| v.0).collect(), output, false)
    }

    /// Clears accumulated gradients so that another backward pass may run.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.parents.iter().any(|&p| p >= id) {
                return Err(DiffError::Cycle { node: id });
            }
            if node.requires_grad && !node.parents.is_empty() {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pg = node_backward(&node.op, &parent_vals, &node.value, &g)?;
                for (&p, gp) in node.parents.iter().zip(pg) {
                    let Some(gp) = gp else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&gp),
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }
}

/// For each flat input index, the flat output index after summing `axes` away.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let kept_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&kept_shape);
    let numel: usize = shape.iter().product();
    (0..numel)
        .map(|i| {
            kept.iter()
                .zip(&out_strides)
                .map(|(&a, &os)| (i / in_strides[a]) % shape[a] * os)
                .sum()
        })
        .collect()
}

fn node_backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    g: &Tensor,
) -> Result<Vec<Option<Tensor>>, DiffError> {
    let one = |t: Tensor| Ok(vec![Some(t)]);
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), Some(g.map(|v| -v))]),
        Op::Mul => Ok(vec![
            Some(g.zip_map(inputs[1], |a, b| a * b)),
            Some(g.zip_map(inputs[0], |a, b| a * b)),
        ]),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = kernels::matmul(g.data(), b.data(), m, n, k, false, true);
            let gb = kernels::matmul(a.data(), g.data(), k, m, n, true, false);
            Ok(vec![
                Some(Tensor::new(a.shape(), ga)?),
                Some(Tensor::new(b.shape(), gb)?),
            ])
        }
        Op::Conv2d(geom) | Op::ConvT2d(geom) => {
            let (gi, gw, gb) = if matches!(op, Op::Conv2d(_)) {
                kernels::conv2d_backward(geom, inputs[0].data(), inputs[1].data(), g.data())
            } else {
                kernels::conv_transpose2d_backward(geom, inputs[0].data(), inputs[1].data(), g.data())
            };
            let mut out = vec![
                Some(Tensor::new(inputs[0].shape(), gi)?),
                Some(Tensor::new(inputs[1].shape(), gw)?),
            ];
            if inputs.len() == 3 {
                out.push(Some(Tensor::new(inputs[2].shape(), gb)?));
            }
            Ok(out)
        }
        Op::Sum { axes } | Op::Mean { axes, .. } => {
            let scale = match op {
                Op::Mean { count, .. } => 1.0 / *count as f64,
                _ => 1.0,
            };
            let map = reduce_map(inputs[0].shape(), axes);
            let data = map.iter().map(|&o| g.data()[o] * scale).collect();
            one(Tensor::new(inputs[0].shape(), data)?)
        }
        Op::Exp => one(g.zip_map(output, |a, y| a * y)),
        Op::Ln => one(g.zip_map(inputs[0], |a, x| a / x)),
        Op::Softplus => one(g.zip_map(inputs[0], |a, x| a * sigmoid(x))),
        Op::Tanh => one(g.zip_map(output, |a, y| a * (1.0 - y * y))),
        Op::Sigmoid => one(g.zip_map(output, |a, y| a * y * (1.0 - y))),
        Op::Relu => one(g.zip_map(inputs[0], |a, x| if x > 0.0 { a } else { 0.0 })),
        Op::Scale(c) => one(g.map(|a| a * c)),
        Op::AddScalar | Op::Reshape => one(Tensor::new(inputs[0].shape(), g.data().to_vec())?),
        Op::Clamp { lo, hi } => one(g.zip_map(inputs[0], |a, x| {
            if x >= *lo && x <= *hi {
                a
            } else {
                0.0
            }
        })),
        Op::Broadcast => {
            let inner = inputs[0].numel();
            let mut acc = vec![0.0; inner];
            for chunk in g.data().chunks(inner) {
                for (a, v) in acc.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            one(Tensor::new(inputs[0].shape(), acc)?)
        }
        Op::Concat { axis, sizes } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut out = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for (inp, &s) in inputs.iter().zip(sizes) {
                let mut data = Vec::with_capacity(inp.numel());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    data.extend_from_slice(&g.data()[base..base + s * inner]);
                }
                out.push(Some(Tensor::new(inp.shape(), data)?));
                offset += s;
            }
            Ok(out)
        }
        Op::Slice { axis, start } => {
            let shape = inputs[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let dim = shape[*axis];
            let len = g.shape()[*axis];
            let mut data = vec![0.0; inputs[0].numel()];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            one(Tensor::new(shape, data)?)
        }
        Op::Custom(c) => {
            let grads = c.backward(inputs, output, g);
            if grads.len() != inputs.len() {
                return Err(DiffError::CustomArity {
                    op: c.name(),
                    expected: inputs.len(),
                    got: grads.len(),
                });
            }
            Ok(grads)
        }
    }
}
