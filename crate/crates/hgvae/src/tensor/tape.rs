//! Gradient tape: records primitive operations during the forward pass and
//! replays them backward to accumulate gradients.
//!
//! Tensors on the tape are addressed by [`TensorId`]; every primitive
//! validates operand shapes and rejects non-finite outputs instead of
//! storing them.

use super::kernels as kn;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Exp(TensorId),
    Log(TensorId),
    Sqrt(TensorId),
    Square(TensorId),
    Gelu(TensorId),
    Affine { x: TensorId, mul: Real },
    Clamp { x: TensorId, lo: Real, hi: Real },
    Sum { x: TensorId, axes: Vec<usize> },
    Mean { x: TensorId, axes: Vec<usize> },
    Concat { xs: Vec<TensorId>, axis: usize },
    Slice { x: TensorId, axis: usize, start: usize, len: usize },
    Transpose(TensorId),
    Reshape(TensorId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations with their saved activations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Standard normal CDF, used by the exact (Gaussian-CDF) GeLU.
fn norm_cdf(x: Real) -> Real {
    #[cfg(not(feature = "f32"))]
    let e = libm::erf(x / std::f64::consts::SQRT_2);
    #[cfg(feature = "f32")]
    let e = libm::erff(x / std::f32::consts::SQRT_2);
    0.5 * (1.0 + e)
}

/// Standard normal PDF.
fn norm_pdf(x: Real) -> Real {
    const INV_SQRT_2PI: Real = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: TensorId) -> &[Real] {
        self.nodes[id.0].value.data()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Real {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, opname: &'static str) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of `{opname}`")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Record an input tensor. Gradients flow into it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<TensorId> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId> {
        self.leaf(value, false)
    }

    fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Matrix multiply. Supports 2D x 2D, and batched forms where either
    /// operand carries a leading batch axis ([B,m,k] @ [k,n], [m,k] @
    /// [B,k,n], [B,m,k] @ [B,k,n]).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (asv, bsv) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let value = match (asv.as_slice(), bsv.as_slice()) {
            ([m, k], [k2, n]) => {
                if k != k2 {
                    return Err(Self::shape_err("matmul", &asv, &bsv));
                }
                let mut out = vec![0.0; m * n];
                kn::mm(self.data(a), self.data(b), *m, *k, *n, &mut out);
                Tensor::new(vec![*m, *n], out)?
            }
            ([bb, m, k], [k2, n]) => {
                if k != k2 {
                    return Err(Self::shape_err("matmul", &asv, &bsv));
                }
                let mut out = vec![0.0; bb * m * n];
                kn::mm(self.data(a), self.data(b), bb * m, *k, *n, &mut out);
                Tensor::new(vec![*bb, *m, *n], out)?
            }
            ([m, k], [bb, k2, n]) => {
                if k != k2 {
                    return Err(Self::shape_err("matmul", &asv, &bsv));
                }
                let mut wide = vec![0.0; bb * k * n];
                kn::permute_bkn_to_kbn(self.data(b), *bb, *k, *n, &mut wide);
                let mut out_wide = vec![0.0; m * bb * n];
                kn::mm(self.data(a), &wide, *m, *k, bb * n, &mut out_wide);
                let mut out = vec![0.0; bb * m * n];
                kn::permute_kbn_to_bkn(&out_wide, *m, *bb, *n, &mut out);
                Tensor::new(vec![*bb, *m, *n], out)?
            }
            ([ba, m, k], [bb, k2, n]) => {
                if k != k2 || ba != bb {
                    return Err(Self::shape_err("matmul", &asv, &bsv));
                }
                let mut out = vec![0.0; ba * m * n];
                for bi in 0..*ba {
                    kn::mm(
                        &self.data(a)[bi * m * k..(bi + 1) * m * k],
                        &self.data(b)[bi * k * n..(bi + 1) * k * n],
                        *m,
                        *k,
                        *n,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
                Tensor::new(vec![*ba, *m, *n], out)?
            }
            _ => return Err(Self::shape_err("matmul", &asv, &bsv)),
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Matmul(a, b), rg, "matmul")
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        opname: &'static str,
        make: impl Fn(TensorId, TensorId) -> Op,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<TensorId> {
        let out_shape = kn::broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| Self::shape_err(opname, self.shape(a), self.shape(b)))?;
        let mut out = vec![0.0; out_shape.iter().product()];
        kn::zip_broadcast(
            self.data(a),
            self.shape(a),
            self.data(b),
            self.shape(b),
            &out_shape,
            &mut out,
            f,
        );
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::new(out_shape, out)?, make(a, b), rg, opname)
    }

    /// Elementwise add with right-aligned broadcasting (also the
    /// broadcast bias add).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    fn unary(
        &mut self,
        x: TensorId,
        opname: &'static str,
        op: Op,
        f: impl Fn(Real) -> Real,
    ) -> Result<TensorId> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push(value, op, rg, opname)
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "exp", Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "log", Op::Log(x), |v| v.ln())
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "sqrt", Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn square(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "square", Op::Square(x), |v| v * v)
    }

    /// Exact Gaussian-CDF GeLU: `x * Phi(x)`.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "gelu", Op::Gelu(x), |v| v * norm_cdf(v))
    }

    /// `mul * x + add` with scalar constants.
    pub fn affine(&mut self, x: TensorId, mul: Real, add: Real) -> Result<TensorId> {
        self.unary(x, "affine", Op::Affine { x, mul }, |v| mul * v + add)
    }

    pub fn neg(&mut self, x: TensorId) -> Result<TensorId> {
        self.affine(x, -1.0, 0.0)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: TensorId, lo: Real, hi: Real) -> Result<TensorId> {
        self.unary(x, "clamp", Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    fn check_axes(&self, x: TensorId, axes: &[usize], opname: &'static str) -> Result<Vec<usize>> {
        let rank = self.shape(x).len();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&ax| ax >= rank) {
            return Err(Error::InvalidArgument(format!(
                "{opname}: axis out of range for rank-{rank} tensor: {axes:?}"
            )));
        }
        Ok(axes)
    }

    fn reduce_forward(&self, x: TensorId, axes: &[usize], mean: bool) -> (Tensor, usize) {
        let in_shape = self.shape(x);
        let keepdim: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(d, &s)| if axes.contains(&d) { 1 } else { s })
            .collect();
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect();
        let count: usize = axes.iter().map(|&d| in_shape[d]).product();
        let mut out = vec![0.0; keepdim.iter().product()];
        kn::reduce_into_shape(self.data(x), in_shape, &keepdim, 1.0, &mut out);
        if mean {
            let inv = 1.0 / count as Real;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        (Tensor::new(out_shape, out).expect("reduce shape"), count)
    }

    /// Sum over the given axes; the reduced axes are removed from the
    /// shape (an empty axis list over a full-rank tensor yields a scalar
    /// via [`Tape::sum_all`]).
    pub fn sum_axes(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let axes = self.check_axes(x, axes, "sum")?;
        let (value, _) = self.reduce_forward(x, &axes, false);
        let rg = self.requires_grad(x);
        self.push(value, Op::Sum { x, axes }, rg, "sum")
    }

    pub fn mean_axes(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let axes = self.check_axes(x, axes, "mean")?;
        let (value, _) = self.reduce_forward(x, &axes, true);
        let rg = self.requires_grad(x);
        self.push(value, Op::Mean { x, axes }, rg, "mean")
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean_axes(x, &axes)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat: empty input list".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!(
                "concat: axis {axis} out of range for rank-{rank} tensor"
            )));
        }
        let mut axis_total = 0usize;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != rank
                || s.iter()
                    .enumerate()
                    .any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(Self::shape_err("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let out_run = axis_total * inner;
        for o in 0..outer {
            let mut offset = 0usize;
            for &x in xs {
                let d = self.shape(x)[axis];
                let run = d * inner;
                let src = &self.data(x)[o * run..(o + 1) * run];
                out[o * out_run + offset..o * out_run + offset + run].copy_from_slice(src);
                offset += run;
            }
        }
        let rg = xs.iter().any(|&x| self.requires_grad(x));
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        if axis >= rank || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice: range {start}..{} invalid for axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_run = shape[axis] * inner;
        let dst_run = len * inner;
        let mut out = vec![0.0; outer * dst_run];
        for o in 0..outer {
            let src = &self.data(x)[o * src_run + start * inner..o * src_run + (start + len) * inner];
            out[o * dst_run..(o + 1) * dst_run].copy_from_slice(src);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(x);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice { x, axis, start, len },
            rg,
            "slice",
        )
    }

    /// Swap the last two axes (rank >= 2; a leading batch axis is kept).
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose: rank {} < 2",
                shape.len()
            )));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let mut out = vec![0.0; batch * r * c];
        let data = self.data(x);
        for bi in 0..batch {
            let src = &data[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let rg = self.requires_grad(x);
        self.push(Tensor::new(out_shape, out)?, Op::Transpose(x), rg, "transpose")
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(x).numel() {
            return Err(Self::shape_err("reshape", self.shape(x), &shape));
        }
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        let rg = self.requires_grad(x);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// Replay the tape backward from a scalar loss. Every tensor recorded
    /// with `requires_grad` receives a gradient of its own shape;
    /// gradients accumulate additively across multiple uses, and tensors
    /// unreachable from the loss get exact zeros.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Unreached requires_grad tensors get exact zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<Real>>], x: TensorId, f: impl FnOnce(&mut Vec<Real>)) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let buf = grads[x.0].get_or_insert_with(|| vec![0.0; self.nodes[x.0].value.numel()]);
        f(buf);
    }

    fn propagate(&self, i: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(grads, a, |dst| {
                    kn::reduce_into_shape(g, &out_shape, self.shape(a), 1.0, dst)
                });
                self.accumulate(grads, b, |dst| {
                    kn::reduce_into_shape(g, &out_shape, self.shape(b), 1.0, dst)
                });
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(grads, a, |dst| {
                    kn::reduce_into_shape(g, &out_shape, self.shape(a), 1.0, dst)
                });
                self.accumulate(grads, b, |dst| {
                    kn::reduce_into_shape(g, &out_shape, self.shape(b), -1.0, dst)
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let mut prod = vec![0.0; g.len()];
                    kn::zip_broadcast(
                        g,
                        &out_shape,
                        self.data(b),
                        self.shape(b),
                        &out_shape,
                        &mut prod,
                        |gv, bv| gv * bv,
                    );
                    self.accumulate(grads, a, |dst| {
                        kn::reduce_into_shape(&prod, &out_shape, self.shape(a), 1.0, dst)
                    });
                }
                if self.requires_grad(b) {
                    let mut prod = vec![0.0; g.len()];
                    kn::zip_broadcast(
                        g,
                        &out_shape,
                        self.data(a),
                        self.shape(a),
                        &out_shape,
                        &mut prod,
                        |gv, av| gv * av,
                    );
                    self.accumulate(grads, b, |dst| {
                        kn::reduce_into_shape(&prod, &out_shape, self.shape(b), 1.0, dst)
                    });
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let mut prod = vec![0.0; g.len()];
                    kn::zip_broadcast(
                        g,
                        &out_shape,
                        self.data(b),
                        self.shape(b),
                        &out_shape,
                        &mut prod,
                        |gv, bv| gv / bv,
                    );
                    self.accumulate(grads, a, |dst| {
                        kn::reduce_into_shape(&prod, &out_shape, self.shape(a), 1.0, dst)
                    });
                }
                if self.requires_grad(b) {
                    // d/db (a/b) = -a / b^2 = -out / b
                    let out_data = self.nodes[i].value.data();
                    let gtimes: Vec<Real> = g.iter().zip(out_data).map(|(&gv, &ov)| gv * ov).collect();
                    let mut prod = vec![0.0; g.len()];
                    kn::zip_broadcast(
                        &gtimes,
                        &out_shape,
                        self.data(b),
                        self.shape(b),
                        &out_shape,
                        &mut prod,
                        |gv, bv| gv / bv,
                    );
                    self.accumulate(grads, b, |dst| {
                        kn::reduce_into_shape(&prod, &out_shape, self.shape(b), -1.0, dst)
                    });
                }
            }
            Op::Exp(x) => {
                let out = self.nodes[i].value.data();
                self.accumulate(grads, *x, |dst| {
                    for ((d, &gv), &ov) in dst.iter_mut().zip(g).zip(out) {
                        *d += gv * ov;
                    }
                });
            }
            Op::Log(x) => {
                let x = *x;
                let xd = self.data(x);
                self.accumulate(grads, x, |dst| {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xd) {
                        *d += gv / xv;
                    }
                });
            }
            Op::Sqrt(x) => {
                let out = self.nodes[i].value.data();
                self.accumulate(grads, *x, |dst| {
                    for ((d, &gv), &ov) in dst.iter_mut().zip(g).zip(out) {
                        *d += gv * 0.5 / ov;
                    }
                });
            }
            Op::Square(x) => {
                let x = *x;
                let xd = self.data(x);
                self.accumulate(grads, x, |dst| {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xd) {
                        *d += gv * 2.0 * xv;
                    }
                });
            }
            Op::Gelu(x) => {
                let x = *x;
                let xd = self.data(x);
                self.accumulate(grads, x, |dst| {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xd) {
                        *d += gv * (norm_cdf(xv) + xv * norm_pdf(xv));
                    }
                });
            }
            Op::Affine { x, mul, .. } => {
                let mul = *mul;
                self.accumulate(grads, *x, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv * mul;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let x = *x;
                let (lo, hi) = (*lo, *hi);
                let xd = self.data(x);
                self.accumulate(grads, x, |dst| {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xd) {
                        if xv > lo && xv < hi {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let x = *x;
                let scale = match &self.nodes[i].op {
                    Op::Mean { .. } => {
                        let count: usize = axes.iter().map(|&d| self.shape(x)[d]).product();
                        1.0 / count as Real
                    }
                    _ => 1.0,
                };
                let in_shape = self.shape(x).to_vec();
                let keepdim: Vec<usize> = in_shape
                    .iter()
                    .enumerate()
                    .map(|(d, &s)| if axes.contains(&d) { 1 } else { s })
                    .collect();
                // Broadcast g (keepdim layout) back up to the input shape.
                let st = kn::broadcast_strides(&keepdim, in_shape.len());
                self.accumulate(grads, x, |dst| {
                    let mut coords = vec![0usize; in_shape.len()];
                    let mut ig = 0usize;
                    for d in dst.iter_mut() {
                        *d += g[ig] * scale;
                        for dd in (0..in_shape.len()).rev() {
                            coords[dd] += 1;
                            ig += st[dd];
                            if coords[dd] < in_shape[dd] {
                                break;
                            }
                            coords[dd] = 0;
                            ig -= st[dd] * in_shape[dd];
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let axis = *axis;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_run = out_shape[axis] * inner;
                let mut offset = 0usize;
                for &x in xs {
                    let d = self.shape(x)[axis];
                    let run = d * inner;
                    self.accumulate(grads, x, |dst| {
                        for o in 0..outer {
                            let src = &g[o * out_run + offset..o * out_run + offset + run];
                            for (dv, &gv) in dst[o * run..(o + 1) * run].iter_mut().zip(src) {
                                *dv += gv;
                            }
                        }
                    });
                    offset += run;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let (x, axis, start, len) = (*x, *axis, *start, *len);
                let in_shape = self.shape(x).to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let src_run = in_shape[axis] * inner;
                let dst_run = len * inner;
                self.accumulate(grads, x, |dst| {
                    for o in 0..outer {
                        let gslice = &g[o * dst_run..(o + 1) * dst_run];
                        let base = o * src_run + start * inner;
                        for (dv, &gv) in dst[base..base + dst_run].iter_mut().zip(gslice) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let x = *x;
                let rank = out_shape.len();
                let (r, c) = (out_shape[rank - 2], out_shape[rank - 1]);
                let batch: usize = out_shape[..rank - 2].iter().product();
                self.accumulate(grads, x, |dst| {
                    for bi in 0..batch {
                        let gs = &g[bi * r * c..(bi + 1) * r * c];
                        let ds = &mut dst[bi * r * c..(bi + 1) * r * c];
                        // g is (r x c) in the transposed frame; write back swapped
                        for ii in 0..r {
                            for jj in 0..c {
                                ds[jj * r + ii] += gs[ii * c + jj];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
        }
    }

    fn backward_matmul(&self, a: TensorId, b: TensorId, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let asv = self.shape(a).to_vec();
        let bsv = self.shape(b).to_vec();
        match (asv.as_slice(), bsv.as_slice()) {
            ([m, k], [_, n]) if asv.len() == 2 && bsv.len() == 2 => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    kn::mm_nt(g, self.data(b), m, n, k, &mut da);
                    self.accumulate(grads, a, |dst| {
                        for (d, v) in dst.iter_mut().zip(da) {
                            *d += v;
                        }
                    });
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    kn::mm_tn(self.data(a), g, m, k, n, &mut db);
                    self.accumulate(grads, b, |dst| {
                        for (d, v) in dst.iter_mut().zip(db) {
                            *d += v;
                        }
                    });
                }
            }
            ([bb, m, k], [_, n]) if bsv.len() == 2 => {
                let (bb, m, k, n) = (*bb, *m, *k, *n);
                if self.requires_grad(a) {
                    let mut da = vec![0.0; bb * m * k];
                    kn::mm_nt(g, self.data(b), bb * m, n, k, &mut da);
                    self.accumulate(grads, a, |dst| {
                        for (d, v) in dst.iter_mut().zip(da) {
                            *d += v;
                        }
                    });
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    kn::mm_tn(self.data(a), g, bb * m, k, n, &mut db);
                    self.accumulate(grads, b, |dst| {
                        for (d, v) in dst.iter_mut().zip(db) {
                            *d += v;
                        }
                    });
                }
            }
            ([m, k], [bb, _, n]) if asv.len() == 2 => {
                let (m, k, bb, n) = (*m, *k, *bb, *n);
                let mut g_wide = vec![0.0; bb * m * n];
                kn::permute_bkn_to_kbn(g, bb, m, n, &mut g_wide);
                if self.requires_grad(a) {
                    let mut b_wide = vec![0.0; bb * k * n];
                    kn::permute_bkn_to_kbn(self.data(b), bb, k, n, &mut b_wide);
                    let mut da = vec![0.0; m * k];
                    kn::mm_nt(&g_wide, &b_wide, m, bb * n, k, &mut da);
                    self.accumulate(grads, a, |dst| {
                        for (d, v) in dst.iter_mut().zip(da) {
                            *d += v;
                        }
                    });
                }
                if self.requires_grad(b) {
                    let mut db_wide = vec![0.0; k * bb * n];
                    kn::mm_tn(self.data(a), &g_wide, m, k, bb * n, &mut db_wide);
                    let mut db = vec![0.0; bb * k * n];
                    kn::permute_kbn_to_bkn(&db_wide, k, bb, n, &mut db);
                    self.accumulate(grads, b, |dst| {
                        for (d, v) in dst.iter_mut().zip(db) {
                            *d += v;
                        }
                    });
                }
            }
            ([ba, m, k], [_, _, n]) => {
                let (ba, m, k, n) = (*ba, *m, *k, *n);
                if self.requires_grad(a) {
                    let mut da = vec![0.0; ba * m * k];
                    for bi in 0..ba {
                        kn::mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &self.data(b)[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, a, |dst| {
                        for (d, v) in dst.iter_mut().zip(da) {
                            *d += v;
                        }
                    });
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; ba * k * n];
                    for bi in 0..ba {
                        kn::mm_tn(
                            &self.data(a)[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    self.accumulate(grads, b, |dst| {
                        for (d, v) in dst.iter_mut().zip(db) {
                            *d += v;
                        }
                    });
                }
            }
            _ => unreachable!("matmul forward validated shapes"),
        }
    }
}

/// Gradient buffers keyed by [`TensorId`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[Real]> {
        self.grads
            .get(id.0)
            .and_then(|g| g.as_ref())
            .map(|g| g.as_slice())
    }
}
