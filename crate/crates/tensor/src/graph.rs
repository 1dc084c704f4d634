//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every op in execution order. Inputs of a node always
//! have smaller indices than the node itself, so walking the tape backwards
//! visits ops in anti-topological order and each op exactly once.

use std::cell::{Ref, RefCell};

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    ChannelMul {
        x: Var,
        w: Var,
    },
    ChannelAdd {
        x: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Sum(Var),
    Mean(Var),
    MassNorm(Var),
    RelLogits {
        q: Var,
        rel_h: Var,
        rel_w: Var,
        h: usize,
        w: usize,
    },
    SpaceToDepth {
        x: Var,
        p: usize,
    },
    DepthToSpace {
        x: Var,
        p: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Tanh, _) => "tanh",
            Op::Unary(Unary::Relu, _) => "relu",
            Op::Unary(Unary::Abs, _) => "abs",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "hadamard",
            Op::Affine { .. } => "affine",
            Op::ScaleBy { .. } => "scale_by",
            Op::ChannelMul { .. } => "channel_mul",
            Op::ChannelAdd { .. } => "channel_add",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2(_) => "upsample2",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MassNorm(_) => "mass_norm",
            Op::RelLogits { .. } => "rel_logits",
            Op::SpaceToDepth { .. } => "space_to_depth",
            Op::DepthToSpace { .. } => "depth_to_space",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of executed ops. Confined to one thread; build one per sequence.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            check_finite: false,
        }
    }

    /// Every op result is scanned for NaN/Inf and reported as an error.
    pub fn with_finite_checks() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Copies the current value of `x` into a fresh constant, cutting gradient flow.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn unary(&self, kind: Unary, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            match kind {
                Unary::Sigmoid => xv.map(|v| T::one() / (T::one() + (-v).exp())),
                Unary::Tanh => xv.map(|v| v.tanh()),
                Unary::Relu => xv.map(|v| if v > T::zero() { v } else { T::zero() }),
                Unary::Abs => xv.map(|v| v.abs()),
            }
        };
        self.push(out, Op::Unary(kind, x), &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape() != bv.shape() {
                return Err(TensorError::mismatch(
                    Op::<T>::Binary(kind, a, b).name(),
                    av.shape(),
                    bv.shape(),
                ));
            }
            match kind {
                Binary::Add => av.zip_map(&bv, |p, q| p + q)?,
                Binary::Sub => av.zip_map(&bv, |p, q| p - q)?,
                Binary::Mul => av.zip_map(&bv, |p, q| p * q)?,
            }
        };
        self.push(out, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Sums a non-empty list of equally shaped values.
    pub fn add_all(&self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs
            .split_first()
            .ok_or_else(|| TensorError::invalid("add_all", "empty operand list"))?;
        rest.iter().try_fold(*first, |acc, &x| self.add(acc, x))
    }

    /// `scale·x + shift`.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&self, x: Var, scale: T) -> Result<Var> {
        self.affine(x, scale, T::zero())
    }

    /// Multiplies `x` by the one-element tensor `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let out = {
            let sv = self.value(s);
            if sv.numel() != 1 {
                return Err(TensorError::invalid(
                    "scale_by",
                    format!("scale must have one element, got shape {:?}", sv.shape()),
                ));
            }
            let k = sv.item();
            self.value(x).map(|v| v * k)
        };
        self.push(out, Op::ScaleBy { x, s }, &[x, s])
    }

    fn channel_check(&self, op: &'static str, x: Var, p: Var) -> Result<(usize, usize)> {
        let (xs, ps) = (self.shape(x), self.shape(p));
        if xs.is_empty() || ps.len() != 1 || ps[0] != xs[0] {
            return Err(TensorError::mismatch(op, &xs, &ps));
        }
        Ok((xs[0], xs.iter().skip(1).product()))
    }

    /// Per-channel multiply: `x[c, ...] · w[c]`.
    pub fn channel_mul(&self, x: Var, w: Var) -> Result<Var> {
        let (_, inner) = self.channel_check("channel_mul", x, w)?;
        let out = {
            let (xv, wv) = (self.value(x), self.value(w));
            let mut out = xv.clone();
            for (row, &wc) in out.data_mut().chunks_mut(inner).zip(wv.data()) {
                row.iter_mut().for_each(|v| *v *= wc);
            }
            out
        };
        self.push(out, Op::ChannelMul { x, w }, &[x, w])
    }

    /// Per-channel add: `x[c, ...] + b[c]`.
    pub fn channel_add(&self, x: Var, b: Var) -> Result<Var> {
        let (_, inner) = self.channel_check("channel_add", x, b)?;
        let out = {
            let (xv, bv) = (self.value(x), self.value(b));
            let mut out = xv.clone();
            for (row, &bc) in out.data_mut().chunks_mut(inner).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v += bc);
            }
            out
        };
        self.push(out, Op::ChannelAdd { x, b }, &[x, b])
    }

    // ---- linear algebra and shape ----------------------------------------

    /// `op(a)·op(b)` for rank-2 operands, `op` optionally transposing.
    pub fn matmul_t(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.rank() != 2 || bv.rank() != 2 {
                return Err(TensorError::mismatch("matmul", av.shape(), bv.shape()));
            }
            let (m, ka) = if trans_a {
                (av.shape()[1], av.shape()[0])
            } else {
                (av.shape()[0], av.shape()[1])
            };
            let (kb, n) = if trans_b {
                (bv.shape()[1], bv.shape()[0])
            } else {
                (bv.shape()[0], bv.shape()[1])
            };
            if ka != kb {
                return Err(TensorError::mismatch("matmul", av.shape(), bv.shape()));
            }
            let mut out = vec![T::zero(); m * n];
            gemm(trans_a, trans_b, m, n, ka, T::one(), av.data(), bv.data(), T::zero(), &mut out);
            Tensor::from_vec(&[m, n], out)?
        };
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if axis >= xv.rank() {
                return Err(TensorError::AxisOutOfRange {
                    op: "softmax",
                    axis,
                    rank: xv.rank(),
                });
            }
            let data = kernels::softmax_forward(xv.data(), xv.shape(), axis);
            Tensor::from_vec(xv.shape(), data)?
        };
        self.push(out, Op::Softmax { x, axis }, &[x])
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat", "no operands"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            if axis >= first.len() {
                return Err(TensorError::AxisOutOfRange {
                    op: "concat",
                    axis,
                    rank: first.len(),
                });
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(TensorError::mismatch("concat", &first, s));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = kernels::axis_split(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.0].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_vec(&shape, data)?
        };
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if axis >= xv.rank() {
                return Err(TensorError::AxisOutOfRange {
                    op: "narrow",
                    axis,
                    rank: xv.rank(),
                });
            }
            if start + len > xv.shape()[axis] {
                return Err(TensorError::invalid(
                    "narrow",
                    format!(
                        "range {start}..{} exceeds extent {}",
                        start + len,
                        xv.shape()[axis]
                    ),
                ));
            }
            let (outer, n, inner) = kernels::axis_split(xv.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = len;
            Tensor::from_vec(&shape, data)?
        };
        self.push(out, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if xv.rank() != 2 {
                return Err(TensorError::invalid(
                    "transpose",
                    format!("expected rank 2, got {:?}", xv.shape()),
                ));
            }
            let (m, n) = (xv.shape()[0], xv.shape()[1]);
            let d = xv.data();
            Tensor::from_fn(&[n, m], |idx| d[(idx % m) * n + idx / m])
        };
        self.push(out, Op::Transpose(x), &[x])
    }

    // ---- spatial ----------------------------------------------------------

    /// Same-padded stride-1 cross-correlation of `x[c_in,h,w]` with
    /// `w[c_out,c_in,k,k]` (odd `k`) plus optional `b[c_out]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let (xv, wv) = (self.value(x), self.value(w));
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
                return Err(TensorError::mismatch("conv2d", xs, ws));
            }
            if ws[2] % 2 == 0 {
                return Err(TensorError::invalid(
                    "conv2d",
                    format!("kernel size {} must be odd", ws[2]),
                ));
            }
            let bias = b.map(|b| self.value(b));
            if let Some(bv) = &bias {
                if bv.shape() != [ws[0]] {
                    return Err(TensorError::mismatch("conv2d bias", bv.shape(), &ws[..1]));
                }
            }
            let data = kernels::conv2d_forward(
                xv.data(),
                wv.data(),
                bias.as_ref().map(|b| b.data()),
                xs[0],
                ws[0],
                xs[1],
                xs[2],
                ws[2],
            );
            Tensor::from_vec(&[ws[0], xs[1], xs[2]], data)?
        };
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Conv2d { x, w, b }, &inputs)
    }

    /// 2×2 stride-2 max pooling over the two trailing axes of `[c,h,w]`.
    pub fn maxpool2(&self, x: Var) -> Result<Var> {
        let (out, argmax) = {
            let xv = self.value(x);
            let s = xv.shape();
            if s.len() != 3 {
                return Err(TensorError::invalid("maxpool2", format!("expected [c,h,w], got {s:?}")));
            }
            if s[1] % 2 != 0 || s[2] % 2 != 0 {
                return Err(TensorError::invalid(
                    "maxpool2",
                    format!("spatial extent {}x{} is not even", s[1], s[2]),
                ));
            }
            let (data, arg) = kernels::maxpool2_forward(xv.data(), s[0], s[1], s[2]);
            (Tensor::from_vec(&[s[0], s[1] / 2, s[2] / 2], data)?, arg)
        };
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Nearest-neighbour ×2 upsampling of `[c,h,w]`.
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let s = xv.shape();
            if s.len() != 3 {
                return Err(TensorError::invalid("upsample2", format!("expected [c,h,w], got {s:?}")));
            }
            let data = kernels::upsample2_forward(xv.data(), s[0], s[1], s[2]);
            Tensor::from_vec(&[s[0], 2 * s[1], 2 * s[2]], data)?
        };
        self.push(out, Op::Upsample2(x), &[x])
    }

    pub fn space_to_depth(&self, x: Var, p: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let s = xv.shape();
            if s.len() != 3 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
                return Err(TensorError::invalid(
                    "space_to_depth",
                    format!("patch {p} incompatible with shape {s:?}"),
                ));
            }
            let data = kernels::space_to_depth(xv.data(), s[0], s[1], s[2], p);
            Tensor::from_vec(&[s[0] * p * p, s[1] / p, s[2] / p], data)?
        };
        self.push(out, Op::SpaceToDepth { x, p }, &[x])
    }

    pub fn depth_to_space(&self, x: Var, p: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let s = xv.shape();
            if s.len() != 3 || p == 0 || s[0] % (p * p) != 0 {
                return Err(TensorError::invalid(
                    "depth_to_space",
                    format!("patch {p} incompatible with shape {s:?}"),
                ));
            }
            let c = s[0] / (p * p);
            let data = kernels::depth_to_space(xv.data(), c, s[1] * p, s[2] * p, p);
            Tensor::from_vec(&[c, s[1] * p, s[2] * p], data)?
        };
        self.push(out, Op::DepthToSpace { x, p }, &[x])
    }

    /// Relative-position logits `[hw, hw]` from queries `q[hw, d]` and
    /// embeddings `rel_h[2h−1, d]`, `rel_w[2w−1, d]`.
    pub fn rel_logits(&self, q: Var, rel_h: Var, rel_w: Var, h: usize, w: usize) -> Result<Var> {
        let out = {
            let (qv, rh, rw) = (self.value(q), self.value(rel_h), self.value(rel_w));
            let qs = qv.shape();
            if qs.len() != 2 || qs[0] != h * w {
                return Err(TensorError::invalid(
                    "rel_logits",
                    format!("queries {qs:?} do not cover a {h}x{w} grid"),
                ));
            }
            let d = qs[1];
            if rh.shape() != [2 * h - 1, d] || rw.shape() != [2 * w - 1, d] {
                return Err(TensorError::mismatch("rel_logits", rh.shape(), rw.shape()));
            }
            let data = kernels::rel_logits_forward(qv.data(), rh.data(), rw.data(), h, w, d);
            Tensor::from_vec(&[h * w, h * w], data)?
        };
        self.push(
            out,
            Op::RelLogits {
                q,
                rel_h,
                rel_w,
                h,
                w,
            },
            &[q, rel_h, rel_w],
        )
    }

    // ---- reductions and output shaping --------------------------------------

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let m = {
            let xv = self.value(x);
            xv.sum() / T::from_usize(xv.numel().max(1)).unwrap()
        };
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Projects `[c, ...]` channel vectors onto valid belief masses: each
    /// channel is clamped to `[0, 1]`, then if the channel sum at a location
    /// exceeds one, all channels there are divided by the sum.
    pub fn mass_norm(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if xv.rank() < 1 {
                return Err(TensorError::invalid("mass_norm", "needs a channel axis"));
            }
            let c = xv.shape()[0];
            let inner = xv.numel() / c.max(1);
            let mut out = xv.map(|v| v.max(T::zero()).min(T::one()));
            let d = out.data_mut();
            for p in 0..inner {
                let s: T = (0..c).map(|ci| d[ci * inner + p]).sum();
                if s > T::one() {
                    for ci in 0..c {
                        d[ci * inner + p] /= s;
                    }
                }
            }
            out
        };
        self.push(out, Op::MassNorm(x), &[x])
    }

    // ---- reverse pass ---------------------------------------------------------

    /// Accumulates d(root)/d(node) into every differentiable node reachable
    /// from the scalar `root`. Previous gradients are cleared first.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        {
            let r = &nodes[root.0];
            if r.value.numel() != 1 {
                return Err(TensorError::NonScalarRoot(r.value.shape().to_vec()));
            }
            if !r.requires_grad {
                return Err(TensorError::DetachedGraph);
            }
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        let root_shape = nodes[root.0].value.shape().to_vec();
        nodes[root.0].grad = Some(Tensor::ones(&root_shape));

        for i in (0..=root.0).rev() {
            let (before, rest) = nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            let contributions = backprop_op(&node.op, &node.value, g, before)?;
            for (v, t) in contributions {
                let target = &mut before[v.0];
                match &mut target.grad {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            // Leaves keep their gradient; intermediate gradients are released.
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        Ok(())
    }
}

fn needs<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Gradient contributions of one op to its inputs.
fn backprop_op<T: Scalar>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    nodes: &[Node<T>],
) -> Result<Vec<(Var, Tensor<T>)>> {
    let val = |v: Var| &nodes[v.0].value;
    let mut res = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Unary(kind, x) => {
            if needs(nodes, *x) {
                let gx = match kind {
                    Unary::Sigmoid => g.zip_map(out, |g, y| g * y * (T::one() - y))?,
                    Unary::Tanh => g.zip_map(out, |g, y| g * (T::one() - y * y))?,
                    Unary::Relu => g.zip_map(val(*x), |g, x| if x > T::zero() { g } else { T::zero() })?,
                    Unary::Abs => g.zip_map(val(*x), |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })?,
                };
                res.push((*x, gx));
            }
        }
        Op::Binary(kind, a, b) => {
            let (na, nb) = (needs(nodes, *a), needs(nodes, *b));
            match kind {
                Binary::Add => {
                    if na {
                        res.push((*a, g.clone()));
                    }
                    if nb {
                        res.push((*b, g.clone()));
                    }
                }
                Binary::Sub => {
                    if na {
                        res.push((*a, g.clone()));
                    }
                    if nb {
                        res.push((*b, g.map(|v| -v)));
                    }
                }
                Binary::Mul => {
                    if na {
                        res.push((*a, g.zip_map(val(*b), |g, y| g * y)?));
                    }
                    if nb {
                        res.push((*b, g.zip_map(val(*a), |g, y| g * y)?));
                    }
                }
            }
        }
        Op::Affine { x, scale } => {
            if needs(nodes, *x) {
                let s = *scale;
                res.push((*x, g.map(|v| v * s)));
            }
        }
        Op::ScaleBy { x, s } => {
            let k = val(*s).item();
            if needs(nodes, *x) {
                res.push((*x, g.map(|v| v * k)));
            }
            if needs(nodes, *s) {
                let dot: T = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                res.push((*s, Tensor::from_vec(val(*s).shape(), vec![dot])?));
            }
        }
        Op::ChannelMul { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            let c = wv.numel();
            let inner = xv.numel() / c;
            if needs(nodes, *x) {
                let mut gx = g.clone();
                for (row, &wc) in gx.data_mut().chunks_mut(inner).zip(wv.data()) {
                    row.iter_mut().for_each(|v| *v *= wc);
                }
                res.push((*x, gx));
            }
            if needs(nodes, *w) {
                let gw: Vec<T> = g
                    .data()
                    .chunks(inner)
                    .zip(xv.data().chunks(inner))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                    .collect();
                res.push((*w, Tensor::from_vec(&[c], gw)?));
            }
        }
        Op::ChannelAdd { x, b } => {
            let c = val(*b).numel();
            let inner = g.numel() / c;
            if needs(nodes, *x) {
                res.push((*x, g.clone()));
            }
            if needs(nodes, *b) {
                let gb: Vec<T> = g.data().chunks(inner).map(|r| r.iter().copied().sum()).collect();
                res.push((*b, Tensor::from_vec(&[c], gb)?));
            }
        }
        Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
        } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let k = if *trans_a { av.shape()[0] } else { av.shape()[1] };
            if needs(nodes, *a) {
                let mut ga = vec![T::zero(); av.numel()];
                if !*trans_a {
                    // dA = G · op(B)ᵀ
                    gemm(false, !*trans_b, m, k, n, T::one(), g.data(), bv.data(), T::zero(), &mut ga);
                } else {
                    // dA = op(B) · Gᵀ
                    gemm(*trans_b, true, k, m, n, T::one(), bv.data(), g.data(), T::zero(), &mut ga);
                }
                res.push((*a, Tensor::from_vec(av.shape(), ga)?));
            }
            if needs(nodes, *b) {
                let mut gb = vec![T::zero(); bv.numel()];
                if !*trans_b {
                    // dB = op(A)ᵀ · G
                    gemm(!*trans_a, false, k, n, m, T::one(), av.data(), g.data(), T::zero(), &mut gb);
                } else {
                    // dB = Gᵀ · op(A)
                    gemm(true, *trans_a, n, k, m, T::one(), g.data(), av.data(), T::zero(), &mut gb);
                }
                res.push((*b, Tensor::from_vec(bv.shape(), gb)?));
            }
        }
        Op::Softmax { x, axis } => {
            if needs(nodes, *x) {
                let gx = kernels::softmax_backward(out.data(), g.data(), out.shape(), *axis);
                res.push((*x, Tensor::from_vec(out.shape(), gx)?));
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = kernels::axis_split(out.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let pv = val(*p);
                let len = pv.shape()[*axis];
                if needs(nodes, *p) {
                    let mut data = Vec::with_capacity(pv.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    res.push((*p, Tensor::from_vec(pv.shape(), data)?));
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            if needs(nodes, *x) {
                let xv = val(*x);
                let (outer, n, inner) = kernels::axis_split(xv.shape(), *axis);
                let len = out.shape()[*axis];
                let mut gx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                res.push((*x, gx));
            }
        }
        Op::Reshape(x) => {
            if needs(nodes, *x) {
                res.push((*x, g.clone().reshape(val(*x).shape())?));
            }
        }
        Op::Transpose(x) => {
            if needs(nodes, *x) {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let d = g.data();
                res.push((*x, Tensor::from_fn(&[n, m], |idx| d[(idx % m) * n + idx / m])));
            }
        }
        Op::Conv2d { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (xs, ws) = (xv.shape(), wv.shape());
            let need_b = b.map(|b| needs(nodes, b)).unwrap_or(false);
            let grads = kernels::conv2d_backward(
                g.data(),
                xv.data(),
                wv.data(),
                xs[0],
                ws[0],
                xs[1],
                xs[2],
                ws[2],
                (needs(nodes, *x), needs(nodes, *w), need_b),
            );
            if let Some(gx) = grads.input {
                res.push((*x, Tensor::from_vec(xs, gx)?));
            }
            if let Some(gw) = grads.weight {
                res.push((*w, Tensor::from_vec(ws, gw)?));
            }
            if let (Some(b), Some(gb)) = (b, grads.bias) {
                res.push((*b, Tensor::from_vec(&[ws[0]], gb)?));
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if needs(nodes, *x) {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&gi, &src) in g.data().iter().zip(argmax) {
                    gx.data_mut()[src as usize] += gi;
                }
                res.push((*x, gx));
            }
        }
        Op::Upsample2(x) => {
            if needs(nodes, *x) {
                let s = val(*x).shape().to_vec();
                let gx = kernels::upsample2_backward(g.data(), s[0], s[1], s[2]);
                res.push((*x, Tensor::from_vec(&s, gx)?));
            }
        }
        Op::Sum(x) => {
            if needs(nodes, *x) {
                res.push((*x, Tensor::full(val(*x).shape(), g.item())));
            }
        }
        Op::Mean(x) => {
            if needs(nodes, *x) {
                let xv = val(*x);
                let k = g.item() / T::from_usize(xv.numel().max(1)).unwrap();
                res.push((*x, Tensor::full(xv.shape(), k)));
            }
        }
        Op::MassNorm(x) => {
            if needs(nodes, *x) {
                let xv = val(*x);
                let c = xv.shape()[0];
                let inner = xv.numel() / c.max(1);
                let xd = xv.data();
                let gd = g.data();
                let mut gx = Tensor::zeros(xv.shape());
                let gxd = gx.data_mut();
                let clamp = |v: T| v.max(T::zero()).min(T::one());
                for p in 0..inner {
                    let s: T = (0..c).map(|ci| clamp(xd[ci * inner + p])).sum();
                    let (dot, scale) = if s > T::one() {
                        let dot: T = (0..c)
                            .map(|ci| gd[ci * inner + p] * clamp(xd[ci * inner + p]))
                            .sum();
                        (dot / (s * s), T::one() / s)
                    } else {
                        (T::zero(), T::one())
                    };
                    for ci in 0..c {
                        let idx = ci * inner + p;
                        let inside = xd[idx] > T::zero() && xd[idx] < T::one();
                        if inside {
                            gxd[idx] = gd[idx] * scale - dot;
                        }
                    }
                }
                res.push((*x, gx));
            }
        }
        Op::RelLogits {
            q,
            rel_h,
            rel_w,
            h,
            w,
        } => {
            let (qv, rh, rw) = (val(*q), val(*rel_h), val(*rel_w));
            let d = qv.shape()[1];
            let grads = kernels::rel_logits_backward(g.data(), qv.data(), rh.data(), rw.data(), *h, *w, d);
            if needs(nodes, *q) {
                res.push((*q, Tensor::from_vec(qv.shape(), grads.q)?));
            }
            if needs(nodes, *rel_h) {
                res.push((*rel_h, Tensor::from_vec(rh.shape(), grads.rel_h)?));
            }
            if needs(nodes, *rel_w) {
                res.push((*rel_w, Tensor::from_vec(rw.shape(), grads.rel_w)?));
            }
        }
        Op::SpaceToDepth { x, p } => {
            if needs(nodes, *x) {
                let s = val(*x).shape().to_vec();
                let gx = kernels::depth_to_space(g.data(), s[0], s[1], s[2], *p);
                res.push((*x, Tensor::from_vec(&s, gx)?));
            }
        }
        Op::DepthToSpace { x, p } => {
            if needs(nodes, *x) {
                let s = out.shape().to_vec();
                let gx = kernels::space_to_depth(g.data(), s[0], s[1], s[2], *p);
                res.push((*x, Tensor::from_vec(val(*x).shape(), gx)?));
            }
        }
    }
    Ok(res)
}
