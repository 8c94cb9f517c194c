//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Node ids increase in
//! creation order, so reverse id order is a valid topological order for
//! the backward sweep.

use matrixmultiply::dgemm;

use super::tensor::{axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};
use super::TensorError;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Sin,
    Cos,
    Exp,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// Axis-aligned vertex grid sampled by [`Graph::grid_sample`].
///
/// Vertices sit at `min + i * (max - min) / (res - 1)` along each axis and
/// are stored x-major: `((ix * res) + iy) * res + iz`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub res: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl GridSpec {
    pub fn vertices(&self) -> usize {
        self.res * self.res * self.res
    }

    pub fn vertex_position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let n = (self.res - 1) as f64;
        let idx = [ix, iy, iz];
        std::array::from_fn(|a| self.min[a] + (self.max[a] - self.min[a]) * idx[a] as f64 / n)
    }

    /// Trilinear stencil for `p`: eight (vertex, weight, d weight / d p) entries,
    /// or `None` outside the box.
    #[allow(clippy::type_complexity)]
    pub fn stencil(&self, p: [f64; 3]) -> Option<[(usize, f64, [f64; 3]); 8]> {
        let g = self.res;
        let mut i0 = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut scale = [0.0; 3];
        for a in 0..3 {
            if !(p[a] >= self.min[a] && p[a] <= self.max[a]) {
                return None;
            }
            let extent = self.max[a] - self.min[a];
            scale[a] = (g - 1) as f64 / extent;
            let u = (p[a] - self.min[a]) * scale[a];
            let base = (u.floor() as usize).min(g - 2);
            i0[a] = base;
            frac[a] = u - base as f64;
        }
        let mut out = [(0usize, 0.0, [0.0; 3]); 8];
        for (corner, slot) in out.iter_mut().enumerate() {
            let bits = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
            let mut w = [0.0; 3];
            let mut dw = [0.0; 3];
            for a in 0..3 {
                if bits[a] == 1 {
                    w[a] = frac[a];
                    dw[a] = scale[a];
                } else {
                    w[a] = 1.0 - frac[a];
                    dw[a] = -scale[a];
                }
            }
            let idx = ((i0[0] + bits[0]) * g + (i0[1] + bits[1])) * g + (i0[2] + bits[2]);
            *slot = (
                idx,
                w[0] * w[1] * w[2],
                [dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2]],
            );
        }
        Some(out)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary { op: BinaryOp, a: Var, b: Var },
    Affine { x: Var, scale: f64 },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Act { x: Var, kind: Activation },
    Softmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Reduce { x: Var, op: Reduction, axis: Option<usize>, argmax: Vec<usize> },
    GatherRows { x: Var, index: Vec<usize> },
    ScatterRows { x: Var, index: Vec<usize> },
    Encode { x: Var, bands: usize },
    Rodrigues { x: Var },
    GridSample { grid: Var, points: Var, spec: GridSpec, channel: usize },
    Composite { sigma: Var, rgb: Var, deltas: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { op, .. } => match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            },
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Act { kind, .. } => match kind {
                Activation::Relu => "relu",
                Activation::Sigmoid => "sigmoid",
                Activation::Softplus => "softplus",
                Activation::Sin => "sin",
                Activation::Cos => "cos",
                Activation::Exp => "exp",
                Activation::Abs => "abs",
            },
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape { .. } => "reshape",
            Op::Reduce { op, .. } => match op {
                Reduction::Sum => "sum",
                Reduction::Mean => "mean",
                Reduction::Max => "max",
            },
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Encode { .. } => "encode",
            Op::Rodrigues { .. } => "rodrigues",
            Op::GridSample { .. } => "grid_sample",
            Op::Composite { .. } => "composite",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Tape of tensor operations with reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    debug: bool,
    fault: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            debug: cfg!(debug_assertions),
            fault: None,
        }
    }

    /// Enables or disables the per-op finiteness assertion.
    pub fn set_debug(&mut self, on: bool) {
        self.debug = on;
    }

    /// Scales the backward rule of every op named `op` by 1.5. Used only to
    /// prove that the gradient checker notices a wrong rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; zeros when `v` was unreachable.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Result<Var, TensorError> {
        if self.debug && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, requires_grad, op))
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = Op::Binary { op, a, b }.name();
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            }
        })?;
        if self.debug && op == BinaryOp::Div && tb.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::ZeroDivisor);
        }
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
            BinaryOp::Div => |x: f64, y: f64| x / y,
        };
        let n: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if out_shape == ta.shape() && is_row_broadcast(tb.shape(), &out_shape) {
            let m = db.len();
            da.iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[i % m]))
                .collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut out = vec![0.0; n];
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        self.push(
            Tensor::from_parts(out_shape, data),
            &[a, b],
            Op::Binary { op, a, b },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, &[x], Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var, TensorError> {
        self.affine(x, scale, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.mul(x, x)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Activation::Sigmoid => sigmoid,
            Activation::Softplus => softplus,
            Activation::Sin => f64::sin,
            Activation::Cos => f64::cos,
            Activation::Exp => f64::exp,
            Activation::Abs => f64::abs,
        };
        let value = self.value(x).map(f);
        self.push(value, &[x], Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Abs)
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, 0.0);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::MatMul { a, b },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), &[x], Op::Transpose { x })
    }

    // ── structural ─────────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        check_axis("softmax", axis, t.ndim())?;
        let (outer, extent, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| o * extent * inner + e * inner + i;
                let max = (0..extent).map(|e| d[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for e in 0..extent {
                    let v = (d[at(e)] - max).exp();
                    out[at(e)] = v;
                    sum += v;
                }
                for e in 0..extent {
                    out[at(e)] /= sum;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], Op::Softmax { x, axis })
    }

    /// Concatenates along `axis`; tensors with no elements are skipped.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let live: Vec<Var> = parts
            .iter()
            .copied()
            .filter(|&p| !self.value(p).is_empty())
            .collect();
        let Some(&first) = live.first() else {
            return Err(TensorError::Invalid("concat of no non-empty parts".into()));
        };
        let base = self.shape(first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in &live {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in &live {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            &live,
            Op::Concat { parts: live.clone(), axis },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        check_axis("narrow", axis, t.ndim())?;
        if start + len > t.shape()[axis] || len == 0 {
            return Err(TensorError::Invalid(format!(
                "narrow [{start}, {}) out of range for extent {} on axis {axis}",
                start + len,
                t.shape()[axis]
            )));
        }
        let (outer, extent, inner) = axis_split(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Op::Narrow { x, axis, start },
        )
    }

    /// Splits into consecutive pieces of the given sizes along `axis`.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>, TensorError> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, &[x], Op::Reshape { x })
    }

    /// Reduction over `axis` (kept with extent 1) or over everything (shape `[1]`).
    pub fn reduce(&mut self, x: Var, op: Reduction, axis: Option<usize>) -> Result<Var, TensorError> {
        let t = self.value(x);
        let d = t.data();
        let (outer, extent, inner, shape) = match axis {
            None => (1, d.len(), 1, vec![1]),
            Some(a) => {
                check_axis("reduce", a, t.ndim())?;
                let (o, e, i) = axis_split(t.shape(), a);
                let mut s = t.shape().to_vec();
                s[a] = 1;
                (o, e, i, s)
            }
        };
        if extent == 0 {
            return Err(TensorError::Invalid("reduction over an empty axis".into()));
        }
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == Reduction::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| o * extent * inner + e * inner + i;
                let slot = o * inner + i;
                match op {
                    Reduction::Sum | Reduction::Mean => {
                        let mut s = 0.0;
                        for e in 0..extent {
                            s += d[at(e)];
                        }
                        out[slot] = if op == Reduction::Mean { s / extent as f64 } else { s };
                    }
                    Reduction::Max => {
                        let mut best = at(0);
                        for e in 1..extent {
                            if d[at(e)] > d[best] {
                                best = at(e);
                            }
                        }
                        out[slot] = d[best];
                        argmax[slot] = best;
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Op::Reduce { x, op, axis, argmax },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.reduce(x, Reduction::Sum, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        self.reduce(x, Reduction::Mean, None)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(x, Reduction::Sum, Some(axis))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let rows = t.shape()[0];
        let width = t.len() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index {
            if r >= rows {
                return Err(TensorError::IndexOutOfRange { index: r, len: rows });
            }
            out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Op::GatherRows { x, index: index.to_vec() },
        )
    }

    /// Places row `j` of `x` at row `index[j]` of a zero tensor with `rows` rows.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.shape()[0] != index.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let width = if index.is_empty() {
            t.shape()[1..].iter().product()
        } else {
            t.len() / index.len()
        };
        let mut out = vec![0.0; rows * width];
        for (j, &r) in index.iter().enumerate() {
            if r >= rows {
                return Err(TensorError::IndexOutOfRange { index: r, len: rows });
            }
            out[r * width..(r + 1) * width].copy_from_slice(&t.data()[j * width..(j + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows;
        self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Op::ScatterRows { x, index: index.to_vec() },
        )
    }

    // ── domain kernels ─────────────────────────────────────────────────

    /// Sinusoidal encoding of each row of `x` (`B × d` → `B × 2·bands·d`).
    /// Layout: coordinate-major, band-inner, `sin` before `cos`.
    pub fn encode(&mut self, x: Var, bands: usize) -> Result<Var, TensorError> {
        if bands == 0 {
            return Err(TensorError::Invalid("encoding needs at least one band".into()));
        }
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(TensorError::Invalid(format!(
                "encode expects a B×d batch, got {:?}",
                t.shape()
            )));
        }
        let (b, d) = (t.shape()[0], t.shape()[1]);
        let width = 2 * bands * d;
        let mut out = vec![0.0; b * width];
        for r in 0..b {
            for c in 0..d {
                let v = t.data()[r * d + c];
                for band in 0..bands {
                    let arg = band_frequency(band) * v;
                    let at = r * width + c * 2 * bands + 2 * band;
                    out[at] = arg.sin();
                    out[at + 1] = arg.cos();
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![b, width], out),
            &[x],
            Op::Encode { x, bands },
        )
    }

    /// Axis-angle rows (`K × 3`) to rotation matrices (`K × 3 × 3`).
    pub fn rodrigues(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.ndim() != 2 || t.shape()[1] != 3 {
            return Err(TensorError::Invalid(format!(
                "rodrigues expects K×3 axis-angles, got {:?}",
                t.shape()
            )));
        }
        let k = t.shape()[0];
        let mut out = Vec::with_capacity(k * 9);
        for r in 0..k {
            let w = [t.data()[3 * r], t.data()[3 * r + 1], t.data()[3 * r + 2]];
            out.extend_from_slice(&rodrigues_matrix(w));
        }
        self.push(
            Tensor::from_parts(vec![k, 3, 3], out),
            &[x],
            Op::Rodrigues { x },
        )
    }

    /// Trilinear sample of one channel of a `V × C` vertex grid at each point of a
    /// `B × 3` batch. Points outside the box read zero.
    pub fn grid_sample(
        &mut self,
        grid: Var,
        points: Var,
        spec: GridSpec,
        channel: usize,
    ) -> Result<Var, TensorError> {
        let (tg, tp) = (self.value(grid), self.value(points));
        if tg.ndim() != 2 || tg.shape()[0] != spec.vertices() || channel >= tg.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample",
                lhs: tg.shape().to_vec(),
                rhs: vec![spec.vertices(), channel + 1],
            });
        }
        if tp.ndim() != 2 || tp.shape()[1] != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample",
                lhs: tp.shape().to_vec(),
                rhs: vec![tp.shape()[0], 3],
            });
        }
        let c = tg.shape()[1];
        let b = tp.shape()[0];
        let gd = tg.data();
        let mut out = vec![0.0; b];
        for (r, o) in out.iter_mut().enumerate() {
            let p = [tp.data()[3 * r], tp.data()[3 * r + 1], tp.data()[3 * r + 2]];
            if let Some(st) = spec.stencil(p) {
                *o = st.iter().map(|&(idx, w, _)| w * gd[idx * c + channel]).sum();
            }
        }
        self.push(
            Tensor::from_parts(vec![b, 1], out),
            &[grid, points],
            Op::GridSample { grid, points, spec, channel },
        )
    }

    /// Emission-absorption compositing along rays.
    ///
    /// `sigma` is `R × M`, `rgb` holds `R·M·3` colors, `deltas` the `R·M` sample
    /// spacings. Output is `R × 4`: accumulated color then opacity.
    pub fn composite(&mut self, sigma: Var, rgb: Var, deltas: &[f64]) -> Result<Var, TensorError> {
        let (ts, tc) = (self.value(sigma), self.value(rgb));
        if ts.ndim() != 2 || tc.len() != 3 * ts.len() || deltas.len() != ts.len() {
            return Err(TensorError::ShapeMismatch {
                op: "composite",
                lhs: ts.shape().to_vec(),
                rhs: tc.shape().to_vec(),
            });
        }
        let (r, m) = (ts.shape()[0], ts.shape()[1]);
        let mut out = vec![0.0; r * 4];
        for ray in 0..r {
            let span = ray * m..(ray + 1) * m;
            let res = composite_ray(
                &ts.data()[span.clone()],
                &tc.data()[3 * span.start..3 * span.end],
                &deltas[span],
            );
            out[4 * ray..4 * ray + 4].copy_from_slice(&res);
        }
        self.push(
            Tensor::from_parts(vec![r, 4], out),
            &[sigma, rgb],
            Op::Composite { sigma, rgb, deltas: deltas.to_vec() },
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulates d(loss)/d(node) into every grad-requiring leaf reachable
    /// from the scalar `loss`. Previous gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            if self.fault.as_deref() == Some(self.nodes[i].op.name()) {
                for v in &mut g {
                    *v *= 1.5;
                }
            }
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Binary { op: bop, a, b } => self.backward_binary(i, *bop, *a, *b, g),
            Op::Affine { x, scale } => {
                if let Some(gx) = self.grad_buf(*x) {
                    for (acc, &v) in gx.iter_mut().zip(g) {
                        *acc += scale * v;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let Graph { nodes, grads, .. } = self;
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    // dA += dC · Bᵀ
                    gemm(m, n, k, g, (n, 1), nodes[b.0].value.data(), (1, n), ga, 1.0);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    // dB += Aᵀ · dC
                    gemm(k, m, n, nodes[a.0].value.data(), (1, k), g, (n, 1), gb, 1.0);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = self.grad_buf(*x) {
                    for i2 in 0..r {
                        for j in 0..c {
                            gx[i2 * c + j] += g[j * r + i2];
                        }
                    }
                }
            }
            Op::Act { x, kind } => {
                let kind = *kind;
                let Graph { nodes, grads, .. } = self;
                let (xv, yv) = (nodes[x.0].value.data(), nodes[i].value.data());
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for j in 0..gx.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => yv[j] * (1.0 - yv[j]),
                            Activation::Softplus => sigmoid(xv[j]),
                            Activation::Sin => xv[j].cos(),
                            Activation::Cos => -xv[j].sin(),
                            Activation::Exp => yv[j],
                            Activation::Abs => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else if xv[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[j] += g[j] * d;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.clone();
                let (outer, extent, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                if let Some(gx) = self.grad_buf(*x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |e: usize| o * extent * inner + e * inner + ii;
                            let dot: f64 = (0..extent).map(|e| g[at(e)] * yd[at(e)]).sum();
                            for e in 0..extent {
                                gx[at(e)] += yd[at(e)] * (g[at(e)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if let Some(gp) = self.grad_buf(p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for j in 0..ext * inner {
                                gp[dst + j] += g[src + j];
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Narrow { x, axis, start } => {
                let len = self.nodes[i].value.shape()[*axis];
                let (outer, extent, inner) = axis_split(self.shape(*x), *axis);
                let start = *start;
                if let Some(gx) = self.grad_buf(*x) {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.grad_buf(*x) {
                    for (acc, &v) in gx.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
            Op::Reduce { x, op: rop, axis, argmax } => {
                let xshape = self.shape(*x).to_vec();
                let (outer, extent, inner) = match axis {
                    None => (1, xshape.iter().product(), 1),
                    Some(a) => axis_split(&xshape, *a),
                };
                let rop = *rop;
                if let Some(gx) = self.grad_buf(*x) {
                    match rop {
                        Reduction::Sum | Reduction::Mean => {
                            let s = if rop == Reduction::Mean { 1.0 / extent as f64 } else { 1.0 };
                            for o in 0..outer {
                                for ii in 0..inner {
                                    let gv = g[o * inner + ii] * s;
                                    for e in 0..extent {
                                        gx[o * extent * inner + e * inner + ii] += gv;
                                    }
                                }
                            }
                        }
                        Reduction::Max => {
                            for (slot, &at) in argmax.iter().enumerate() {
                                gx[at] += g[slot];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let rows = self.shape(*x)[0];
                let width = self.nodes[x.0].value.len() / rows.max(1);
                if let Some(gx) = self.grad_buf(*x) {
                    for (j, &r) in index.iter().enumerate() {
                        for c in 0..width {
                            gx[r * width + c] += g[j * width + c];
                        }
                    }
                }
            }
            Op::ScatterRows { x, index } => {
                let width = if index.is_empty() {
                    0
                } else {
                    self.nodes[x.0].value.len() / index.len()
                };
                if let Some(gx) = self.grad_buf(*x) {
                    for (j, &r) in index.iter().enumerate() {
                        for c in 0..width {
                            gx[j * width + c] += g[r * width + c];
                        }
                    }
                }
            }
            Op::Encode { x, bands } => {
                let xv = self.nodes[x.0].value.clone();
                let (b, d) = (xv.shape()[0], xv.shape()[1]);
                let width = 2 * bands * d;
                if let Some(gx) = self.grad_buf(*x) {
                    for r in 0..b {
                        for c in 0..d {
                            let v = xv.data()[r * d + c];
                            let mut acc = 0.0;
                            for band in 0..*bands {
                                let f = band_frequency(band);
                                let at = r * width + c * 2 * bands + 2 * band;
                                acc += f * (g[at] * (f * v).cos() - g[at + 1] * (f * v).sin());
                            }
                            gx[r * d + c] += acc;
                        }
                    }
                }
            }
            Op::Rodrigues { x } => {
                let xv = self.nodes[x.0].value.clone();
                if let Some(gx) = self.grad_buf(*x) {
                    for r in 0..xv.shape()[0] {
                        let w = [xv.data()[3 * r], xv.data()[3 * r + 1], xv.data()[3 * r + 2]];
                        let mut gm = [0.0; 9];
                        gm.copy_from_slice(&g[9 * r..9 * r + 9]);
                        let dw = rodrigues_vjp(w, &gm);
                        for a in 0..3 {
                            gx[3 * r + a] += dw[a];
                        }
                    }
                }
            }
            Op::GridSample { grid, points, spec, channel } => {
                let pv = self.nodes[points.0].value.clone();
                let c = self.shape(*grid)[1];
                let b = pv.shape()[0];
                let stencils: Vec<_> = (0..b)
                    .map(|r| spec.stencil([pv.data()[3 * r], pv.data()[3 * r + 1], pv.data()[3 * r + 2]]))
                    .collect();
                if self.nodes[points.0].requires_grad {
                    let gvals = self.nodes[grid.0].value.data().to_vec();
                    let gp = self.grad_buf(*points).expect("requires grad");
                    for (r, st) in stencils.iter().enumerate() {
                        if let Some(st) = st {
                            for &(idx, _, dw) in st {
                                let val = gvals[idx * c + channel];
                                for a in 0..3 {
                                    gp[3 * r + a] += g[r] * dw[a] * val;
                                }
                            }
                        }
                    }
                }
                if let Some(gg) = self.grad_buf(*grid) {
                    for (r, st) in stencils.iter().enumerate() {
                        if let Some(st) = st {
                            for &(idx, w, _) in st {
                                gg[idx * c + channel] += g[r] * w;
                            }
                        }
                    }
                }
            }
            Op::Composite { sigma, rgb, deltas } => {
                let sv = self.nodes[sigma.0].value.clone();
                let cv = self.nodes[rgb.0].value.clone();
                let (r, m) = (sv.shape()[0], sv.shape()[1]);
                let mut gs = vec![0.0; r * m];
                let mut gc = vec![0.0; 3 * r * m];
                for ray in 0..r {
                    let span = ray * m..(ray + 1) * m;
                    composite_ray_vjp(
                        &sv.data()[span.clone()],
                        &cv.data()[3 * span.start..3 * span.end],
                        &deltas[span.clone()],
                        &g[4 * ray..4 * ray + 4],
                        &mut gs[span.clone()],
                        &mut gc[3 * span.start..3 * span.end],
                    );
                }
                if let Some(acc) = self.grad_buf(*sigma) {
                    for (a, v) in acc.iter_mut().zip(&gs) {
                        *a += v;
                    }
                }
                if let Some(acc) = self.grad_buf(*rgb) {
                    for (a, v) in acc.iter_mut().zip(&gc) {
                        *a += v;
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn backward_binary(&mut self, i: usize, op: BinaryOp, a: Var, b: Var, g: &[f64]) {
        let Graph { nodes, grads, .. } = self;
        let out_shape = nodes[i].value.shape();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        let (ad, bd) = (av.data(), bv.data());
        let da = |_ia: usize, ib: usize| match op {
            BinaryOp::Add | BinaryOp::Sub => 1.0,
            BinaryOp::Mul => bd[ib],
            BinaryOp::Div => 1.0 / bd[ib],
        };
        let db = |ia: usize, ib: usize| match op {
            BinaryOp::Add => 1.0,
            BinaryOp::Sub => -1.0,
            BinaryOp::Mul => ad[ia],
            BinaryOp::Div => -ad[ia] / (bd[ib] * bd[ib]),
        };
        // Fast paths: equal shapes, or `b` repeating along the leading axes.
        let same = av.shape() == bv.shape();
        let row = !same && av.shape() == out_shape && is_row_broadcast(bv.shape(), out_shape);
        let period = bv.len().max(1);
        let sa = broadcast_strides(av.shape(), out_shape);
        let sb = broadcast_strides(bv.shape(), out_shape);
        if a != b {
            if let Some(ga) = grad_slot(nodes, grads, a) {
                if same {
                    for j in 0..g.len() {
                        ga[j] += g[j] * da(j, j);
                    }
                } else if row {
                    for j in 0..g.len() {
                        ga[j] += g[j] * da(j, j % period);
                    }
                } else {
                    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| ga[ia] += g[o] * da(ia, ib));
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                if same {
                    for j in 0..g.len() {
                        gb[j] += g[j] * db(j, j);
                    }
                } else if row {
                    for j in 0..g.len() {
                        gb[j % period] += g[j] * db(j, j % period);
                    }
                } else {
                    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| gb[ib] += g[o] * db(ia, ib));
                }
            }
        } else if let Some(gx) = grad_slot(nodes, grads, a) {
            // x op x: both partials land in the same buffer.
            for j in 0..g.len() {
                gx[j] += g[j] * (da(j, j) + db(j, j));
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// True when `b`, ignoring leading unit extents, equals the trailing extents
/// of `out`, so its data repeats with period `b.len()`.
fn is_row_broadcast(b: &[usize], out: &[usize]) -> bool {
    let trimmed: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    out.ends_with(&trimmed)
}

fn check_axis(op: &'static str, axis: usize, ndim: usize) -> Result<(), TensorError> {
    if axis >= ndim {
        Err(TensorError::InvalidAxis { op, axis, ndim })
    } else {
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the slices cover every element addressed by the given extents
    // and strides, and `c` does not alias `a` or `b`.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// `2^band · π`.
pub fn band_frequency(band: usize) -> f64 {
    (1u64 << band) as f64 * std::f64::consts::PI
}

/// Accumulated color and opacity of one ray. `rgb` is `M × 3`.
pub fn composite_ray(sigma: &[f64], rgb: &[f64], deltas: &[f64]) -> [f64; 4] {
    let mut out = [0.0; 4];
    let mut optical_depth: f64 = 0.0;
    for m in 0..sigma.len() {
        let transmittance = (-optical_depth).exp();
        let sd = sigma[m] * deltas[m];
        let weight = transmittance * -(-sd).exp_m1();
        for ch in 0..3 {
            out[ch] += weight * rgb[3 * m + ch];
        }
        out[3] += weight;
        optical_depth += sd;
    }
    out
}

fn composite_ray_vjp(
    sigma: &[f64],
    rgb: &[f64],
    deltas: &[f64],
    g: &[f64],
    gs: &mut [f64],
    gc: &mut [f64],
) {
    let m = sigma.len();
    let mut weights = vec![0.0; m];
    let mut next_t = vec![0.0; m];
    let mut proj = vec![0.0; m];
    let mut optical_depth: f64 = 0.0;
    for j in 0..m {
        let transmittance = (-optical_depth).exp();
        let sd = sigma[j] * deltas[j];
        weights[j] = transmittance * -(-sd).exp_m1();
        optical_depth += sd;
        next_t[j] = (-optical_depth).exp();
        proj[j] = g[0] * rgb[3 * j] + g[1] * rgb[3 * j + 1] + g[2] * rgb[3 * j + 2] + g[3];
        for ch in 0..3 {
            gc[3 * j + ch] += weights[j] * g[ch];
        }
    }
    // Suffix sums of weight·projection for samples behind j.
    let mut behind = 0.0;
    for j in (0..m).rev() {
        gs[j] += deltas[j] * (next_t[j] * proj[j] - behind);
        behind += weights[j] * proj[j];
    }
}

const SERIES_THRESHOLD: f64 = 1e-4;

/// `A(s) = sin θ / θ`, `B(s) = (1 − cos θ) / θ²` with `s = θ²`, and their
/// derivatives in `s`.
fn rodrigues_coefficients(s: f64) -> (f64, f64, f64, f64) {
    if s < SERIES_THRESHOLD {
        let a = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0;
        let b = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0;
        let da = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0;
        let db = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0;
        (a, b, da, db)
    } else {
        let theta = s.sqrt();
        let (sin, cos) = theta.sin_cos();
        let a = sin / theta;
        let b = (1.0 - cos) / s;
        let da = (theta * cos - sin) / (2.0 * s * theta);
        let db = (theta * sin - 2.0 * (1.0 - cos)) / (2.0 * s * s);
        (a, b, da, db)
    }
}

fn skew(w: [f64; 3]) -> [f64; 9] {
    [0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0]
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = (0..3).map(|k| a[3 * r + k] * b[3 * k + c]).sum();
        }
    }
    out
}

/// Row-major rotation matrix of an axis-angle vector.
pub fn rodrigues_matrix(w: [f64; 3]) -> [f64; 9] {
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, _, _) = rodrigues_coefficients(s);
    let k = skew(w);
    let k2 = mat3_mul(&k, &k);
    let mut r = [0.0; 9];
    for j in 0..9 {
        r[j] = a * k[j] + b * k2[j];
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;
    r
}

fn rodrigues_vjp(w: [f64; 3], g: &[f64; 9]) -> [f64; 3] {
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, da, db) = rodrigues_coefficients(s);
    let k = skew(w);
    let k2 = mat3_mul(&k, &k);
    let dot = |x: &[f64; 9], y: &[f64; 9]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let gk = dot(g, &k);
    let gk2 = dot(g, &k2);
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[j] = 1.0;
        let ej = skew(e);
        let ek = mat3_mul(&ej, &k);
        let ke = mat3_mul(&k, &ej);
        let mut sym = [0.0; 9];
        for t in 0..9 {
            sym[t] = ek[t] + ke[t];
        }
        *o = 2.0 * w[j] * da * gk + a * dot(g, &ej) + 2.0 * w[j] * db * gk2 + b * dot(g, &sym);
    }
    out
}
