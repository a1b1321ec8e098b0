//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes are stored in execution order, so a
//! reverse sweep visits each output before any of its inputs.

use rand::Rng;

use crate::conv::ConvGeom;
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { x: Var, y: Var },
    Scale { x: Var, alpha: T },
    Relu { x: Var },
    Log { x: Var },
    Abs { x: Var },
    Softmax { x: Var },
    Concat { parts: Vec<(Var, usize)>, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    MeanAxis { x: Var, axis: usize },
    MeanAll { x: Var },
    SumAll { x: Var },
    Conv2d { x: Var, kernel: Var, bias: Var, geom: ConvGeom, batch: usize, c_out: usize, cols: Vec<T> },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Log { .. } => "log",
            Op::Abs { .. } => "abs",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Slice { .. } => "slice",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, `None` if it does not require grad or was unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; unreachable leaves get zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

/// Append-only record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    overflow: Option<&'static str>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), overflow: None }
    }

    /// First operation that turned finite inputs into non-finite values.
    /// Only tracked in debug builds; callers still see the values themselves.
    pub fn first_overflow(&self) -> Option<&'static str> {
        self.overflow
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input whose gradient backward will report.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions)
            && self.overflow.is_none()
            && !value.is_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
        {
            self.overflow = Some(op.name());
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, T::zero(), &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product of rank-3 tensors: `[B, m, k] x [B, k, n]`, or
    /// `[B, m, k] x [B, n, k]^T` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::ShapeMismatch { op: "batch_matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        if (trans_b && sb[2] != k) || (!trans_b && sb[1] != k) {
            return Err(err());
        }
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                k,
                1,
                &db[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            &[a, b],
        ))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds `y` to every trailing block of `x`; `y.shape` must be a suffix of `x.shape`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(TensorError::ShapeMismatch { op: "add_broadcast", lhs: sx.to_vec(), rhs: sy.to_vec() });
        }
        let block = self.value(y).numel();
        let yv = self.value(y).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + yv[i % block]).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBroadcast { x, y }, &[x, y]))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let alpha = T::from_f64(alpha);
        let out = self.value(x).map(|v| v * alpha);
        self.push(out, Op::Scale { x, alpha }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| !(**v > T::zero())) {
            return Err(TensorError::Domain { op: "log", msg: format!("non-positive input {v}") });
        }
        let out = self.value(x).map(|v| v.ln());
        Ok(self.push(out, Op::Log { x }, &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs { x }, &[x])
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 - p)`. `p == 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Domain { op: "dropout", msg: format!("rate {p} outside [0, 1)") });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(TensorError::AxisOutOfRange { op: "permute", axis: a, rank: shape.len() });
            }
            seen[a] = true;
        }
        if axes.len() != shape.len() || seen.iter().any(|s| !s) {
            return Err(TensorError::shape("permute", format!("{axes:?} is not a permutation of rank {}", shape.len())));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, axes);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::shape("transpose", format!("expected rank 2, got {:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let dim = self.shape(p)[axis];
                data.extend_from_slice(&self.value(p).data()[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let recorded = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Concat { parts: recorded, axis }, parts))
    }

    /// Keeps `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "slice", axis, rank: shape.len() });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("range {start}..{} outside extent {} of {shape:?}", start + len, shape[axis]),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice { x, axis, start }, &[x]))
    }

    // ---- reductions -----------------------------------------------------

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "mean_axis", axis, rank: shape.len() });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let scale = T::from_f64(1.0 / dim as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(mean), Op::MeanAll { x }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(sum), Op::SumAll { x }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| TensorError::shape("softmax", "rank-0 input"))?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    // ---- fused network primitives ----------------------------------------

    /// Strided 2-D cross-correlation with "same" zero padding plus per-channel bias.
    ///
    /// `x` is `[B, C_in, H, W]` (or `[C_in, H, W]`), `kernel` is
    /// `[C_out, C_in, kh, kw]`, `bias` is `[C_out]`. Output spatial extents are
    /// `ceil(H / stride.0) x ceil(W / stride.1)`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let unbatched = sx.len() == 3;
        let (batch, c_in, h, w) = match sx.as_slice() {
            &[c, h, w] => (1, c, h, w),
            &[b, c, h, w] => (b, c, h, w),
            _ => return Err(TensorError::shape("conv2d", format!("input must be rank 3 or 4, got {sx:?}"))),
        };
        if sk.len() != 4 || sk[1] != c_in {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sk });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::shape("conv2d", "stride must be positive"));
        }
        let c_out = sk[0];
        if self.shape(bias) != [c_out] {
            return Err(TensorError::ShapeMismatch { op: "conv2d bias", lhs: sk, rhs: self.shape(bias).to_vec() });
        }
        let geom = ConvGeom::new(c_in, h, w, sk[2], sk[3], stride);
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); batch * rows * p];
        let mut out = vec![T::zero(); batch * c_out * p];
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        for b in 0..batch {
            let col = &mut cols[b * rows * p..(b + 1) * rows * p];
            geom.im2col(&xv[b * c_in * h * w..(b + 1) * c_in * h * w], col);
            let o = &mut out[b * c_out * p..(b + 1) * c_out * p];
            T::gemm(c_out, rows, p, kv, rows, 1, col, p, 1, T::zero(), o);
            for (c, chunk) in o.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let out_shape = if unbatched {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Conv2d { x, kernel, bias, geom, batch, c_out, cols },
            &[x, kernel, bias],
        ))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| TensorError::shape("layer_norm", "rank-0 input"))?;
        for p in [gain, shift] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: sx, rhs: self.shape(p).to_vec() });
            }
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + s[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm { x, gain, shift, xhat, rstd },
            &[x, gain, shift],
        ))
    }

    /// Mean cross-entropy of `[N, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[label];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::from_f64(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d`loss` to every reachable leaf created with [`Tape::param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 || self.value(loss).rank() > 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Zero-initialized accumulator for `v`, or None when `v` needs no gradient.
        fn acc<'a, T: Element>(tape: &Tape<T>, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
            if !tape.nodes[v.0].requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); tape.nodes[v.0].value.numel()]))
        }
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = acc(self, grads, a) {
                    T::gemm(m, n, k, g, n, 1, val(b), 1, n, T::one(), ga);
                }
                if let Some(gb) = acc(self, grads, b) {
                    T::gemm(k, m, n, val(a), 1, k, g, n, 1, T::one(), gb);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = acc(self, grads, a) {
                    let (rs, cs) = if trans_b { (k, 1) } else { (1, n) };
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            n,
                            1,
                            &bv[i * k * n..(i + 1) * k * n],
                            rs,
                            cs,
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = acc(self, grads, b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, gi, 1, n, ai, k, 1, T::one(), out);
                        } else {
                            T::gemm(k, m, n, ai, 1, k, gi, n, 1, T::one(), out);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = acc(self, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = acc(self, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = acc(self, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = acc(self, grads, a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = acc(self, grads, b) {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(val(a)) {
                        *d += s * o;
                    }
                }
            }
            &Op::AddBroadcast { x, y } => {
                if let Some(gx) = acc(self, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gy) = acc(self, grads, y) {
                    let block = gy.len();
                    for chunk in g.chunks(block) {
                        gy.iter_mut().zip(chunk).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Scale { x, alpha } => {
                if let Some(gx) = acc(self, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += alpha * s);
                }
            }
            &Op::Relu { x } => {
                if let Some(gx) = acc(self, grads, x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(val(x)) {
                        if v > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Log { x } => {
                if let Some(gx) = acc(self, grads, x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(val(x)) {
                        *d += s / v;
                    }
                }
            }
            &Op::Abs { x } => {
                if let Some(gx) = acc(self, grads, x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(val(x)) {
                        if v > T::zero() {
                            *d += s;
                        } else if v < T::zero() {
                            *d -= s;
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                if let Some(gx) = acc(self, grads, x) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &(p, dim) in parts {
                    if let Some(gp) = acc(self, grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + dim) * inner];
                            gp[o * dim * inner..(o + 1) * dim * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += dim;
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = acc(self, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Permute { x, axes } => {
                if let Some(gx) = acc(self, grads, *x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let (_, back) = permute_data(g, node.value.shape(), &inverse);
                    gx.iter_mut().zip(back).for_each(|(d, s)| *d += s);
                }
            }
            &Op::Slice { x, axis, start } => {
                if let Some(gx) = acc(self, grads, x) {
                    let (outer, dim, inner) = split_axis(self.nodes[x.0].value.shape(), axis);
                    let len = node.value.shape()[axis];
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::MeanAxis { x, axis } => {
                if let Some(gx) = acc(self, grads, x) {
                    let (outer, dim, inner) = split_axis(self.nodes[x.0].value.shape(), axis);
                    let scale = T::from_f64(1.0 / dim as f64);
                    for o in 0..outer {
                        for d in 0..dim {
                            let dst = (o * dim + d) * inner;
                            for i in 0..inner {
                                gx[dst + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            &Op::MeanAll { x } => {
                if let Some(gx) = acc(self, grads, x) {
                    let s = g[0] / T::from_f64(gx.len() as f64);
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::SumAll { x } => {
                if let Some(gx) = acc(self, grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Conv2d { x, kernel, bias, geom, batch, c_out, cols } => {
                let (rows, p, c_out) = (geom.col_rows(), geom.col_cols(), *c_out);
                if let Some(gk) = acc(self, grads, *kernel) {
                    for b in 0..*batch {
                        T::gemm(
                            c_out,
                            p,
                            rows,
                            &g[b * c_out * p..(b + 1) * c_out * p],
                            p,
                            1,
                            &cols[b * rows * p..(b + 1) * rows * p],
                            1,
                            p,
                            T::one(),
                            gk,
                        );
                    }
                }
                if let Some(gb) = acc(self, grads, *bias) {
                    for b in 0..*batch {
                        for (c, d) in gb.iter_mut().enumerate() {
                            let start = (b * c_out + c) * p;
                            *d += g[start..start + p].iter().copied().sum::<T>();
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let kv = val(*kernel);
                    let image = geom.c_in * geom.h * geom.w;
                    let mut dcols = vec![T::zero(); rows * p];
                    let gx = acc(self, grads, *x).expect("requires grad");
                    for b in 0..*batch {
                        T::gemm(rows, c_out, p, kv, 1, rows, &g[b * c_out * p..(b + 1) * c_out * p], p, 1, T::zero(), &mut dcols);
                        geom.col2im_add(&dcols, &mut gx[b * image..(b + 1) * image]);
                    }
                }
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let d = self.nodes[gain.0].value.numel();
                let rows = rstd.len();
                if let Some(gg) = acc(self, grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gs) = acc(self, grads, *shift) {
                    for r in 0..rows {
                        for j in 0..d {
                            gs[j] += g[r * d + j];
                        }
                    }
                }
                let gain_v = val(*gain);
                if let Some(gx) = acc(self, grads, *x) {
                    let inv_d = T::from_f64(1.0 / d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gain_v[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_d;
                        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = acc(self, grads, *x) {
                    for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(gl) = acc(self, grads, *logits) {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / T::from_f64(labels.len() as f64);
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { T::one() } else { T::zero() };
                            gl[i * c + j] += scale * (probs[i * c + j] - target);
                        }
                    }
                }
            }
        }
    }
}
