//! Reverse-mode tape. Each forward pass records onto a fresh [`Tape`]; values
//! are addressed through copyable [`Var`] handles.

use std::marker::PhantomData;
use std::rc::Rc;

use super::kernels::{self, axis_split};
use super::value::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    AddScalarVar(Var, Var),
    DivScalarVar(Var, Var),
    Recip(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Threshold(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, axis: usize, inv_std: Vec<f64> },
    Conv3x3 { x: Var, w: Var, b: Var },
    Conv1x1 { x: Var, w: Var, b: Var },
    AvgPool(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Pad2d { x: Var, top: usize, left: usize },
    Resize(Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    MeanTrailing(Var),
    GatherRows(Var, Vec<usize>),
    AddNc(Var, Var),
    MulNc(Var, Var),
    MulSpatial(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable ops. Confined to one thread.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    _not_send: PhantomData<Rc<()>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta.to_vec())),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            _not_send: PhantomData,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance from a kink over every non-smooth op that carries gradient:
    /// relu and clamp inputs from their corner, `maximum` operand gaps, and the gap
    /// between the top two entries of `max`. Infinite when there are no such ops.
    /// Finite-difference checks are only meaningful when this exceeds the step.
    pub fn kink_margin(&self) -> f64 {
        let near = |t: &Tensor, at: f64| t.data().iter().fold(f64::INFINITY, |m, v| m.min((v - at).abs()));
        let mut m = f64::INFINITY;
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::Relu(a) => m = m.min(near(self.value(*a), 0.0)),
                Op::ClampMin(a, f) => m = m.min(near(self.value(*a), *f)),
                Op::Threshold(a, t) => m = m.min(near(self.value(*a), *t)),
                Op::Maximum(a, b) => {
                    for (x, y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        m = m.min((x - y).abs());
                    }
                }
                Op::Max(x, arg) => {
                    let d = self.value(*x).data();
                    for (i, v) in d.iter().enumerate() {
                        if i != *arg {
                            m = m.min(d[*arg] - v);
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- element-wise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Element-wise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("maximum", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x.max(*y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Maximum(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `x * s` where `s` is a one-element tensor on the tape.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("mul_scalar_var", self.shape(x), self.shape(s)));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::MulScalarVar(x, s), &[x, s]))
    }

    /// Adds the scalar `s` to every entry of `x`.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("add_scalar_var", self.shape(x), self.shape(s)));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v + k);
        Ok(self.push(out, Op::AddScalarVar(x, s), &[x, s]))
    }

    /// Divides every entry of `x` by the scalar `s`.
    pub fn div_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("div_scalar_var", self.shape(x), self.shape(s)));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v / k);
        Ok(self.push(out, Op::DivScalarVar(x, s), &[x, s]))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / v);
        self.push(out, Op::Recip(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    /// Square root whose gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor));
        self.push(out, Op::ClampMin(a, floor), &[a])
    }

    /// Keeps values strictly above `t`, zeroes the rest.
    pub fn threshold(&mut self, a: Var, t: f64) -> Var {
        let out = self.value(a).map(|v| if v > t { v } else { 0.0 });
        self.push(out, Op::Threshold(a, t), &[a])
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::from_parts(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n));
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        check_rank("transpose", ta, 2)?;
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::from_parts(vec![n, m], transpose_raw(ta.data(), m, n));
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Max-subtracted softmax over `axis`; the normalizer is an order-independent sum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        check_axis("softmax", ta, axis)?;
        let (outer, len, inner) = axis_split(ta.shape(), axis);
        let x = ta.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let m = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut terms: Vec<f64> = (0..len).map(|i| (x[at(i)] - m).exp()).collect();
                for (i, &e) in terms.iter().enumerate() {
                    y[at(i)] = e;
                }
                let z = sorted_sum(&mut terms);
                for i in 0..len {
                    y[at(i)] /= z;
                }
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), y);
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    /// Normalizes each slice along `axis` to zero mean and unit (biased) variance.
    pub fn layernorm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        check_axis("layernorm", ta, axis)?;
        let (outer, len, inner) = axis_split(ta.shape(), axis);
        if len < 2 {
            return Err(Error::precondition("layernorm", format!("slice length {len} < 2")));
        }
        let x = ta.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mean = (0..len).map(|i| x[at(i)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|i| (x[at(i)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + eps).sqrt();
                for i in 0..len {
                    y[at(i)] = (x[at(i)] - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), y);
        Ok(self.push(out, Op::LayerNorm { x: a, axis, inv_std }, &[a]))
    }

    // ---- convolution and spatial ----------------------------------------

    /// 3x3 convolution, stride 1, zero padding. `x: [n,cin,h,w]`, `w: [cout,cin,3,3]`, `b: [cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        check_rank("conv3x3", tx, 4)?;
        if tw.rank() != 4 || tw.shape()[1] != tx.shape()[1] || tw.shape()[2..] != [3, 3] {
            return Err(Error::shape("conv3x3", tx.shape(), tw.shape()));
        }
        let cout = tw.shape()[0];
        if tb.shape() != [cout] {
            return Err(Error::shape("conv3x3 bias", tw.shape(), tb.shape()));
        }
        let s = tx.shape();
        let dims = (s[0], s[1], s[2], s[3]);
        let data = kernels::conv3x3_forward(tx.data(), tw.data(), tb.data(), dims, cout);
        let out = Tensor::from_parts(vec![s[0], cout, s[2], s[3]], data);
        Ok(self.push(out, Op::Conv3x3 { x, w, b }, &[x, w, b]))
    }

    /// Pointwise channel mixing. `x: [n,cin,h,w]`, `w: [cout,cin]`, `b: [cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        check_rank("conv1x1", tx, 4)?;
        if tw.rank() != 2 || tw.shape()[1] != tx.shape()[1] {
            return Err(Error::shape("conv1x1", tx.shape(), tw.shape()));
        }
        let cout = tw.shape()[0];
        if tb.shape() != [cout] {
            return Err(Error::shape("conv1x1 bias", tw.shape(), tb.shape()));
        }
        let s = tx.shape().to_vec();
        let (n, cin, plane) = (s[0], s[1], s[2] * s[3]);
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; n * cout * plane];
        for i in 0..n {
            for co in 0..cout {
                let o = &mut out[(i * cout + co) * plane..(i * cout + co + 1) * plane];
                o.fill(bd[co]);
                for ci in 0..cin {
                    let wv = wd[co * cin + ci];
                    let xp = &xd[(i * cin + ci) * plane..(i * cin + ci + 1) * plane];
                    for (ov, xv) in o.iter_mut().zip(xp) {
                        *ov += wv * xv;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, cout, s[2], s[3]], out);
        Ok(self.push(out, Op::Conv1x1 { x, w, b }, &[x, w, b]))
    }

    /// Non-overlapping `k x k` average pooling over the trailing two dims.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 2 || k == 0 {
            return Err(Error::invalid("avgpool2d", format!("shape {:?}, k={k}", tx.shape())));
        }
        let r = tx.rank();
        let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        if h % k != 0 || w % k != 0 {
            return Err(Error::invalid("avgpool2d", format!("{h}x{w} not divisible by {k}")));
        }
        let planes = tx.numel() / (h * w);
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let xd = tx.data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / k) * ow + xx / k] += xd[(p * h + y) * w + xx] * norm;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPool(x, k), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .map(|&v| self.value(v))
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        check_axis("concat", first, axis)?;
        let base = first.shape().to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        check_axis("slice", tx, axis)?;
        let (outer, full, inner) = axis_split(tx.shape(), axis);
        if len == 0 || start + len > full {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} outside axis {axis} of {:?}", start + len, tx.shape()),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, &[x]))
    }

    /// Places the trailing `h x w` planes of `x` into a zero canvas of `height x width`.
    pub fn pad2d(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(Error::invalid("pad2d", format!("rank of {:?} < 2", tx.shape())));
        }
        let r = tx.rank();
        let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        if top + h > height || left + w > width {
            return Err(Error::invalid(
                "pad2d",
                format!("{h}x{w} at ({top},{left}) exceeds {height}x{width}"),
            ));
        }
        let planes = tx.numel() / (h * w);
        let mut out = vec![0.0; planes * height * width];
        for p in 0..planes {
            for y in 0..h {
                let src = &tx.data()[(p * h + y) * w..(p * h + y + 1) * w];
                let at = (p * height + top + y) * width + left;
                out[at..at + w].copy_from_slice(src);
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[r - 2] = height;
        shape[r - 1] = width;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Pad2d { x, top, left }, &[x]))
    }

    /// Bilinear resize (half-pixel centres, edge clamp) of the trailing two dims.
    pub fn resize_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 2 || height == 0 || width == 0 {
            return Err(Error::invalid(
                "resize_bilinear",
                format!("{:?} -> {height}x{width}", tx.shape()),
            ));
        }
        let r = tx.rank();
        let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        let planes = tx.numel() / (h * w);
        let data = kernels::resize_forward(tx.data(), planes, (h, w), (height, width));
        let mut shape = tx.shape().to_vec();
        shape[r - 2] = height;
        shape[r - 1] = width;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Resize(x), &[x]))
    }

    // ---- reductions and broadcasting -----------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Global maximum; the gradient goes to the first maximal entry.
    pub fn max(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (arg, m) = t.data().iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        );
        self.push(Tensor::scalar(m), Op::Max(x, arg), &[x])
    }

    /// Mean over the trailing `dims` axes.
    pub fn mean_trailing(&mut self, x: Var, dims: usize) -> Result<Var> {
        let t = self.value(x);
        if dims == 0 || dims >= t.rank() {
            return Err(Error::invalid(
                "mean_trailing",
                format!("{dims} dims of {:?}", t.shape()),
            ));
        }
        let keep = t.rank() - dims;
        let inner: usize = t.shape()[keep..].iter().product();
        let data = t
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let shape = t.shape()[..keep].to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanTrailing(x), &[x]))
    }

    /// Selects rows of a `[rows, cols]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        check_rank("gather_rows", t, 2)?;
        let (nrows, cols) = (t.shape()[0], t.shape()[1]);
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows requested"));
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= nrows {
                return Err(Error::invalid("gather_rows", format!("row {r} >= {nrows}")));
            }
            out.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![rows.len(), cols], out);
        Ok(self.push(out, Op::GatherRows(table, rows.to_vec()), &[table]))
    }

    fn check_nc(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tx.rank() < 2 || tv.rank() != 2 || tx.shape()[..2] != tv.shape()[..] {
            return Err(Error::shape(op, tx.shape(), tv.shape()));
        }
        Ok(tx.shape()[2..].iter().product())
    }

    /// Adds a per-(sample, channel) value `v: [n,c]` over all trailing positions of `x: [n,c,...]`.
    pub fn add_nc(&mut self, x: Var, v: Var) -> Result<Var> {
        let inner = self.check_nc("add_nc", x, v)?;
        let (tx, tv) = (self.value(x), self.value(v));
        let mut out = tx.data().to_vec();
        for (chunk, &b) in out.chunks_mut(inner).zip(tv.data()) {
            chunk.iter_mut().for_each(|o| *o += b);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::AddNc(x, v), &[x, v]))
    }

    /// Multiplies by a per-(sample, channel) value `v: [n,c]`.
    pub fn mul_nc(&mut self, x: Var, v: Var) -> Result<Var> {
        let inner = self.check_nc("mul_nc", x, v)?;
        let (tx, tv) = (self.value(x), self.value(v));
        let mut out = tx.data().to_vec();
        for (chunk, &k) in out.chunks_mut(inner).zip(tv.data()) {
            chunk.iter_mut().for_each(|o| *o *= k);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::MulNc(x, v), &[x, v]))
    }

    /// Multiplies every channel of `x: [n,c,h,w]` by the mask `m: [n,h,w]`.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (tx, tm) = (self.value(x), self.value(m));
        let ok =
            tx.rank() == 4 && tm.rank() == 3 && tx.shape()[0] == tm.shape()[0] && tx.shape()[2..] == tm.shape()[1..];
        if !ok {
            return Err(Error::shape("mul_spatial", tx.shape(), tm.shape()));
        }
        let s = tx.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut out = tx.data().to_vec();
        for i in 0..n {
            let mask = &tm.data()[i * plane..(i + 1) * plane];
            for ch in 0..c {
                let o = &mut out[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                o.iter_mut().zip(mask).for_each(|(v, k)| *v *= k);
            }
        }
        let out = Tensor::from_parts(s.to_vec(), out);
        Ok(self.push(out, Op::MulSpatial(x, m), &[x, m]))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates gradients of the scalar `loss` to every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran; call reset_grads first".into()));
        }
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward(format!("var {} is not on this tape", loss.0)))?;
        if !node.value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward("loss is detached from every trainable leaf".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(node.value.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                let shape = self.nodes[v.0].value.shape();
                accumulate(&mut grads[v.0], shape, &delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    send(*a, gd.iter().zip(tb).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    send(*b, gd.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
            }
            Op::Maximum(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let pick_a: Vec<bool> = ta.iter().zip(tb).map(|(x, y)| x >= y).collect();
                send(
                    *a,
                    gd.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect(),
                );
                send(
                    *b,
                    gd.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect(),
                );
            }
            Op::Scale(a, k) => send(*a, gd.iter().map(|g| g * k).collect()),
            Op::AddScalar(a) => send(*a, gd.to_vec()),
            Op::MulScalarVar(x, s) => {
                let k = val(*s).item();
                let tx = val(*x).data();
                if wants(*s) {
                    send(*s, vec![gd.iter().zip(tx).map(|(g, v)| g * v).sum()]);
                }
                send(*x, gd.iter().map(|g| g * k).collect());
            }
            Op::AddScalarVar(x, s) => {
                if wants(*s) {
                    send(*s, vec![gd.iter().sum()]);
                }
                send(*x, gd.to_vec());
            }
            Op::DivScalarVar(x, s) => {
                let k = val(*s).item();
                if wants(*s) {
                    send(*s, vec![-gd.iter().zip(y).map(|(g, v)| g * v).sum::<f64>() / k]);
                }
                send(*x, gd.iter().map(|g| g / k).collect());
            }
            Op::Recip(a) => send(*a, gd.iter().zip(y).map(|(g, r)| -g * r * r).collect()),
            Op::Relu(a) => {
                let ta = val(*a).data();
                send(
                    *a,
                    gd.iter()
                        .zip(ta)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => send(*a, gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Log(a) => {
                let ta = val(*a).data();
                send(*a, gd.iter().zip(ta).map(|(g, x)| g / x).collect());
            }
            Op::Sqrt(a) => send(
                *a,
                gd.iter()
                    .zip(y)
                    .map(|(g, r)| if *r > 0.0 { 0.5 * g / r } else { 0.0 })
                    .collect(),
            ),
            Op::ClampMin(a, floor) => {
                let ta = val(*a).data();
                send(
                    *a,
                    gd.iter()
                        .zip(ta)
                        .map(|(g, x)| if x > floor { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Threshold(a, t) => {
                let ta = val(*a).data();
                send(
                    *a,
                    gd.iter().zip(ta).map(|(g, x)| if x > t { *g } else { 0.0 }).collect(),
                );
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    send(*a, matmul_raw(gd, &bt, m, n, k));
                }
                if wants(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    send(*b, matmul_raw(&at, gd, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                send(*a, transpose_raw(gd, s[1], s[0]));
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| gd[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                send(*a, dx);
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                let n = len as f64;
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let is = inv_std[o * inner + j];
                        let mg = (0..len).map(|i| gd[at(i)]).sum::<f64>() / n;
                        let mgy = (0..len).map(|i| gd[at(i)] * y[at(i)]).sum::<f64>() / n;
                        for i in 0..len {
                            dx[at(i)] = is * (gd[at(i)] - mg - y[at(i)] * mgy);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Conv3x3 { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let s = tx.shape();
                let (gx, gw, gb) =
                    kernels::conv3x3_backward(gd, tx.data(), tw.data(), (s[0], s[1], s[2], s[3]), tw.shape()[0]);
                send(*x, gx);
                send(*w, gw);
                send(*b, gb);
            }
            Op::Conv1x1 { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let s = tx.shape();
                let (n, cin, plane) = (s[0], s[1], s[2] * s[3]);
                let cout = tw.shape()[0];
                let (xd, wd) = (tx.data(), tw.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; cout];
                for i in 0..n {
                    for co in 0..cout {
                        let gp = &gd[(i * cout + co) * plane..(i * cout + co + 1) * plane];
                        gb[co] += gp.iter().sum::<f64>();
                        for ci in 0..cin {
                            let xp = &xd[(i * cin + ci) * plane..(i * cin + ci + 1) * plane];
                            gw[co * cin + ci] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                            let wv = wd[co * cin + ci];
                            let gxp = &mut gx[(i * cin + ci) * plane..(i * cin + ci + 1) * plane];
                            gxp.iter_mut().zip(gp).for_each(|(a, g)| *a += wv * g);
                        }
                    }
                }
                send(*x, gx);
                send(*w, gw);
                send(*b, gb);
            }
            Op::AvgPool(x, k) => {
                let s = val(*x).shape();
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let (oh, ow) = (h / k, w / k);
                let planes = val(*x).numel() / (h * w);
                let norm = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for yy in 0..h {
                        for xx in 0..w {
                            gx[(p * h + yy) * w + xx] = gd[(p * oh + yy / k) * ow + xx / k] * norm;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, gd.to_vec()),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    send(v, part);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(val(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::Pad2d { x, top, left } => {
                let s = val(*x).shape();
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let os = node.value.shape();
                let (height, width) = (os[r - 2], os[r - 1]);
                let planes = val(*x).numel() / (h * w);
                let mut gx = Vec::with_capacity(planes * h * w);
                for p in 0..planes {
                    for yy in 0..h {
                        let at = (p * height + top + yy) * width + left;
                        gx.extend_from_slice(&gd[at..at + w]);
                    }
                }
                send(*x, gx);
            }
            Op::Resize(x) => {
                let s = val(*x).shape();
                let r = s.len();
                let os = node.value.shape();
                let planes = val(*x).numel() / (s[r - 2] * s[r - 1]);
                send(
                    *x,
                    kernels::resize_backward(gd, planes, (s[r - 2], s[r - 1]), (os[r - 2], os[r - 1])),
                );
            }
            Op::Sum(x) => send(*x, vec![gd[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                send(*x, vec![gd[0] / n as f64; n]);
            }
            Op::Max(x, arg) => {
                let mut gx = vec![0.0; val(*x).numel()];
                gx[*arg] = gd[0];
                send(*x, gx);
            }
            Op::MeanTrailing(x) => {
                let inner = val(*x).numel() / gd.len();
                let mut gx = Vec::with_capacity(val(*x).numel());
                for &gv in gd {
                    gx.extend(std::iter::repeat_n(gv / inner as f64, inner));
                }
                send(*x, gx);
            }
            Op::GatherRows(table, rows) => {
                let t = val(*table);
                let cols = t.shape()[1];
                let mut gt = vec![0.0; t.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        gt[r * cols + c] += gd[k * cols + c];
                    }
                }
                send(*table, gt);
            }
            Op::AddNc(x, v) => {
                let inner = val(*x).numel() / val(*v).numel();
                if wants(*v) {
                    send(*v, gd.chunks(inner).map(|c| c.iter().sum()).collect());
                }
                send(*x, gd.to_vec());
            }
            Op::MulNc(x, v) => {
                let tv = val(*v).data();
                let inner = val(*x).numel() / tv.len();
                if wants(*v) {
                    let tx = val(*x).data();
                    send(
                        *v,
                        gd.chunks(inner)
                            .zip(tx.chunks(inner))
                            .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                            .collect(),
                    );
                }
                let mut gx = gd.to_vec();
                for (c, &k) in gx.chunks_mut(inner).zip(tv) {
                    c.iter_mut().for_each(|a| *a *= k);
                }
                send(*x, gx);
            }
            Op::MulSpatial(x, m) => {
                let (tx, tm) = (val(*x), val(*m));
                let s = tx.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let (xd, md) = (tx.data(), tm.data());
                if wants(*m) {
                    let mut gm = vec![0.0; md.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            for p in 0..plane {
                                gm[i * plane + p] += gd[base + p] * xd[base + p];
                            }
                        }
                    }
                    send(*m, gm);
                }
                let mut gx = gd.to_vec();
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for p in 0..plane {
                            gx[base + p] *= md[i * plane + p];
                        }
                    }
                }
                send(*x, gx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Matrix product whose inner sums are taken over the sorted products, so each
/// entry is independent of the order of the inner index.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let mut terms = Vec::with_capacity(k);
    for i in 0..m {
        for j in 0..n {
            terms.clear();
            terms.extend((0..k).map(|p| a[i * k + p] * b[p * n + j]));
            out[i * n + j] = sorted_sum(&mut terms);
        }
    }
    out
}

/// Order-independent sum: sorts the terms before adding them.
pub(crate) fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
