//! Tape of recorded primitive applications with reverse-mode propagation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use super::kernels::{self, ChunkGeometry, ConvDims, GruCache, GruDims};
use super::linalg::{gemm, matmul, Mat};
use super::tensor::{numel, ParamId, Params, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Prelu(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    LogSumExpLast(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Affine { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize },
    ConvTranspose1d { x: Var, w: Var, b: Option<Var>, stride: usize },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose { x: Var, perm: Vec<usize> },
    Flip(Var),
    Gather { x: Var, rows: Vec<usize> },
    Chunk { x: Var, geom: ChunkGeometry },
    OverlapAdd { x: Var, geom: ChunkGeometry },
    Gru { gx: Var, w: Var, b: Var, cache: GruCache },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ScaleBy(a, b) | Prelu(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Relu(a) | Sigmoid(a) | Tanh(a) | ClampMin(a, _)
            | Sum(a) | Mean(a) | SumLast(a) | LogSumExpLast(a) | Reshape(a) | Flip(a) => vec![*a],
            MatMul { a, b, .. } => vec![*a, *b],
            Affine { x, w, b } | Conv1d { x, w, b, .. } | ConvTranspose1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter());
                v
            }
            LayerNorm { x, g, b, .. } => vec![*x, *g, *b],
            L2Normalize { x, .. }
            | Slice { x, .. }
            | Transpose { x, .. }
            | Gather { x, .. }
            | Chunk { x, .. }
            | OverlapAdd { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            Gru { gx, w, b, .. } => vec![*gx, *w, *b],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], kept for leaf nodes.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, `None` if it does not require one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("operand shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes of a row-major array.
fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let last = out_shape[nd - 1];
    let last_stride = src_strides[nd - 1];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend((0..last).map(|j| data[base + j * last_stride]));
        // increment all but the last axis
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which side of its kink every piecewise-linear element evaluated on.
    /// Two evaluations share a linear piece when their patterns are equal.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Prelu(a, _) => out.extend(self.nodes[a.0].value.iter().map(|&x| x > 0.0)),
                Op::ClampMin(a, floor) => out.extend(self.nodes[a.0].value.iter().map(|&x| x > *floor)),
                Op::L2Normalize { norms, eps, .. } => out.extend(norms.iter().map(|&n| n > *eps)),
                _ => {}
            }
        }
        out
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph nodes hold valid shapes")
    }

    /// The parameter a leaf is bound to, if any.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Leaf { param } => param,
            _ => None,
        }
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{op_name}");
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<f64>, param: Option<ParamId>, requires_grad: bool) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Leaf { param },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.leaf(shape, t.into_data(), None, false)
    }

    /// Leaf holding a copy of `t`; differentiable iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape(), t.data().to_vec(), None, t.requires_grad)
    }

    /// Leaf bound to a parameter so its gradient can be accumulated back.
    /// Repeated calls for the same id on one graph return the same leaf.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Result<Var> {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return Ok(*v);
        }
        let t = params.get(id);
        let v = self.leaf(t.shape(), t.data().to_vec(), Some(id), t.requires_grad)?;
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.leaf(&shape, value, None, false)
    }

    // ------------------------------------------------------------ elementwise

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, value, op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// `a * s` where `s` is a single-element node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::shape("scale_by", format!("factor must have shape [1], got {:?}", self.shape(s))));
        }
        let k = self.scalar(s);
        self.map("scale_by", a, |x| x * k, Op::ScaleBy(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Leaky rectifier with a single learned slope `alpha` of shape `[1]`.
    pub fn prelu(&mut self, a: Var, alpha: Var) -> Result<Var> {
        if self.shape(alpha) != [1] {
            return Err(Error::shape("prelu", format!("slope must have shape [1], got {:?}", self.shape(alpha))));
        }
        let s = self.scalar(alpha);
        self.map("prelu", a, |x| if x > 0.0 { x } else { s * x }, Op::Prelu(a, alpha))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.map("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(a))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let f = *shape.last().unwrap();
        let value: Vec<f64> = self.value(a).chunks(f).map(|r| r.iter().sum()).collect();
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        self.push("sum_last", out_shape, value, Op::SumLast(a))
    }

    /// Max-shifted `ln Σ exp` over the last axis.
    pub fn logsumexp_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let f = *shape.last().unwrap();
        let value: Vec<f64> = self
            .value(a)
            .chunks(f)
            .map(|r| {
                let (at, m) = r
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best });
                // the maximum contributes exactly one; log1p keeps the rest precise
                let rest: f64 = r.iter().enumerate().filter(|&(i, _)| i != at).map(|(_, x)| (x - m).exp()).sum();
                m + rest.ln_1p()
            })
            .collect();
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        self.push("logsumexp_last", out_shape, value, Op::LogSumExpLast(a))
    }

    // ------------------------------------------------------------ linear algebra

    /// `a · b` (or `a · bᵀ` when `trans_b`) for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("expected 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (bk, bn) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if sa[1] != bk {
            return Err(Error::shape("matmul", format!("inner dimensions {} and {} differ", sa[1], bk)));
        }
        let mb = Mat::new(self.value(b), sb[0], sb[1]);
        let value = matmul(Mat::new(self.value(a), sa[0], sa[1]), if trans_b { mb.t() } else { mb });
        self.push("matmul", vec![sa[0], bn], value, Op::MatMul { a, b, trans_b })
    }

    /// `x · wᵀ + b` with x `[R, in]`, w `[out, in]`, b `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("affine", format!("input {sx:?} incompatible with weight {sw:?}")));
        }
        let (rows, out) = (sx[0], sw[0]);
        let mut value = vec![0.0; rows * out];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape("affine", format!("bias {:?} does not match {out} outputs", self.shape(b))));
            }
            let bv = self.value(b);
            value.chunks_mut(out).for_each(|r| r.copy_from_slice(bv));
        }
        gemm(
            1.0,
            Mat::new(self.value(x), rows, sx[1]),
            Mat::new(self.value(w), out, sw[1]).t(),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut value,
        );
        self.push("affine", vec![rows, out], value, Op::Affine { x, w, b })
    }

    fn conv_dims(&self, op: &'static str, x: Var, w: Var, b: Option<Var>, stride: usize, transpose: bool) -> Result<ConvDims> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if stride == 0 {
            return Err(Error::shape(op, "stride must be at least 1"));
        }
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[0 + usize::from(!transpose)] {
            return Err(Error::shape(op, format!("input {sx:?} incompatible with weight {sw:?}")));
        }
        let d = if transpose {
            ConvDims { cin: sw[0], cout: sw[1], kernel: sw[2], stride }
        } else {
            ConvDims { cin: sw[1], cout: sw[0], kernel: sw[2], stride }
        };
        if let Some(b) = b {
            if self.shape(b) != [d.cout] {
                return Err(Error::shape(op, format!("bias {:?} does not match {} channels", self.shape(b), d.cout)));
            }
        }
        Ok(d)
    }

    /// x `[cin, T]`, w `[cout, cin, k]` -> `[cout, (T-k)/stride + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let d = self.conv_dims("conv1d", x, w, b, stride, false)?;
        let t = self.shape(x)[1];
        if t < d.kernel {
            return Err(Error::shape("conv1d", format!("input length {t} shorter than kernel {}", d.kernel)));
        }
        let frames = kernels::conv_out_len(t, d.kernel, stride);
        let value = kernels::conv1d_forward(self.value(x), t, self.value(w), b.map(|b| self.value(b)), &d);
        self.push("conv1d", vec![d.cout, frames], value, Op::Conv1d { x, w, b, stride })
    }

    /// x `[cin, L]`, w `[cin, cout, k]` -> `[cout, (L-1)·stride + k]`.
    pub fn conv1d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let d = self.conv_dims("conv1d_transpose", x, w, b, stride, true)?;
        let frames = self.shape(x)[1];
        let t = kernels::convt_out_len(frames, d.kernel, stride);
        let value = kernels::convt_forward(self.value(x), frames, self.value(w), b.map(|b| self.value(b)), &d);
        self.push("conv1d_transpose", vec![d.cout, t], value, Op::ConvTranspose1d { x, w, b, stride })
    }

    /// Normalizes over the last axis, then applies gain `g` and shift `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let f = *shape.last().unwrap();
        if self.shape(g) != [f] || self.shape(b) != [f] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / shift {:?} must match last axis {f}", self.shape(g), self.shape(b)),
            ));
        }
        let rows = self.value(x).len() / f;
        let mut xhat = vec![0.0; rows * f];
        let mut rstd = vec![0.0; rows];
        for (r, row) in self.value(x).chunks(f).enumerate() {
            let mu = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / f as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            xhat[r * f..(r + 1) * f].iter_mut().zip(row).for_each(|(o, v)| *o = (v - mu) * rs);
        }
        let (gv, bv) = (self.value(g), self.value(b));
        let value = xhat.iter().enumerate().map(|(i, xh)| xh * gv[i % f] + bv[i % f]).collect();
        self.push("layer_norm", shape, value, Op::LayerNorm { x, g, b, xhat, rstd })
    }

    /// Divides each vector along `axis` (which must be the last axis) by `max(‖v‖, eps)`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis + 1 != shape.len() {
            return Err(Error::shape("l2_normalize", format!("only the last axis is supported, got axis {axis} of {shape:?}")));
        }
        if eps <= 0.0 {
            return Err(Error::Param(format!("l2_normalize eps must be positive, got {eps}")));
        }
        let f = shape[axis];
        let norms: Vec<f64> = self
            .value(x)
            .chunks(f)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
            .collect();
        let value = self.value(x).iter().enumerate().map(|(i, v)| v / norms[i / f]).collect();
        self.push("l2_normalize", shape, value, Op::L2Normalize { x, norms, eps })
    }

    // ------------------------------------------------------------ shape ops

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                value.extend_from_slice(&self.value(*v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", shape, value, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("range {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", out_shape, value, Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("transpose", format!("{perm:?} is not a permutation of axes of {shape:?}")));
        }
        let (value, out_shape) = permute(self.value(x), &shape, perm);
        self.push("transpose", out_shape, value, Op::Transpose { x, perm: perm.to_vec() })
    }

    /// Reverses the order along axis 0.
    pub fn flip(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let inner: usize = shape[1..].iter().product();
        let value: Vec<f64> = self.value(x).chunks(inner).rev().flatten().copied().collect();
        self.push("flip", shape, value, Op::Flip(x))
    }

    /// Selects rows (axis-0 slices) by index, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x);
        let mut value = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            value.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.push("gather_rows", out_shape, value, Op::Gather { x, rows: rows.to_vec() })
    }

    /// `[F, L]` -> `[F, K, S]`: 50%-overlapped chunks along the last axis, zero padded.
    pub fn chunk(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if k < 2 || k % 2 != 0 {
            return Err(Error::shape("chunk", format!("chunk size must be even and at least 2, got {k}")));
        }
        if shape.len() != 2 {
            return Err(Error::shape("chunk", format!("expected [F, L], got {shape:?}")));
        }
        let geom = ChunkGeometry::new(shape[1], k);
        let value = kernels::chunk_forward(self.value(x), shape[0], &geom);
        self.push("chunk", vec![shape[0], k, geom.chunks], value, Op::Chunk { x, geom })
    }

    /// `[F, K, S]` -> `[F, frames]`; inverse of [`Graph::chunk`].
    pub fn overlap_add(&mut self, x: Var, frames: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("overlap_add", format!("expected [F, K, S], got {shape:?}")));
        }
        let geom = ChunkGeometry::new(frames, shape[1]);
        if geom.k < 2 || geom.k % 2 != 0 || geom.chunks != shape[2] {
            return Err(Error::shape(
                "overlap_add",
                format!("{shape:?} does not chunk {frames} frames (expected {} chunks)", geom.chunks),
            ));
        }
        let value = kernels::overlap_add_forward(self.value(x), shape[0], &geom);
        self.push("overlap_add", vec![shape[0], frames], value, Op::OverlapAdd { x, geom })
    }

    // ------------------------------------------------------------ sequence models

    /// Gated recurrent unit over gx `[T, B, 3H]` (precomputed input projections,
    /// gate order reset|update|candidate) with recurrent weight `[3H, H]` and bias `[3H]`.
    pub fn gru(&mut self, gx: Var, w: Var, b: Var) -> Result<Var> {
        let (sg, sw) = (self.shape(gx).to_vec(), self.shape(w).to_vec());
        if sg.len() != 3 || sw.len() != 2 || sw[0] != 3 * sw[1] || sg[2] != sw[0] || self.shape(b) != [sw[0]] {
            return Err(Error::shape(
                "gru",
                format!("gates {sg:?}, weight {sw:?}, bias {:?} are inconsistent", self.shape(b)),
            ));
        }
        let d = GruDims { steps: sg[0], batch: sg[1], hidden: sw[1] };
        let (value, cache) = kernels::gru_forward(self.value(gx), self.value(w), self.value(b), &d);
        self.push("gru", vec![sg[0], sg[1], sw[1]], value, Op::Gru { gx, w, b, cache })
    }

    /// Single-head scaled dot-product attention over `[B, T, D]` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape(
                "attention",
                format!("q {s:?}, k {:?}, v {:?} must share a [B, T, D] shape", self.shape(k), self.shape(v)),
            ));
        }
        let (value, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v), s[0], s[1], s[2]);
        self.push("attention", s, value, Op::Attention { q, k, v, probs })
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter-bound leaf into `params`.
    pub fn accumulate(&self, grads: &Gradients, params: &mut Params) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, &grads.grads[i]) {
                params.get_mut(*id).accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let mut send = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        let map_g = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, map_g(&|j| g[j] * bv[j]));
                send(*b, map_g(&|j| g[j] * av[j]));
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::ScaleBy(a, s) => {
                let k = val(*s)[0];
                let av = val(*a);
                send(*s, vec![g.iter().zip(av).map(|(x, y)| x * y).sum()]);
                send(*a, g.iter().map(|x| x * k).collect());
            }
            Op::Exp(a) => send(*a, map_g(&|j| g[j] * node.value[j])),
            Op::Log(a) => {
                let av = val(*a);
                send(*a, map_g(&|j| g[j] / av[j]));
            }
            Op::Relu(a) => {
                let av = val(*a);
                send(*a, map_g(&|j| if av[j] > 0.0 { g[j] } else { 0.0 }));
            }
            Op::Prelu(a, alpha) => {
                let av = val(*a);
                let s = val(*alpha)[0];
                let ds = (0..g.len()).filter(|&j| av[j] < 0.0).map(|j| g[j] * av[j]).sum();
                send(*alpha, vec![ds]);
                send(
                    *a,
                    map_g(&|j| {
                        if av[j] > 0.0 {
                            g[j]
                        } else if av[j] < 0.0 {
                            g[j] * s
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Sigmoid(a) => send(*a, map_g(&|j| g[j] * node.value[j] * (1.0 - node.value[j]))),
            Op::Tanh(a) => send(*a, map_g(&|j| g[j] * (1.0 - node.value[j] * node.value[j]))),
            Op::ClampMin(a, floor) => {
                let av = val(*a);
                send(*a, map_g(&|j| if av[j] > *floor { g[j] } else { 0.0 }));
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumLast(a) => {
                let av = val(*a);
                let f = av.len() / g.len();
                send(*a, (0..av.len()).map(|j| g[j / f]).collect());
            }
            Op::LogSumExpLast(a) => {
                let av = val(*a);
                let f = av.len() / g.len();
                send(*a, (0..av.len()).map(|j| g[j / f] * (av[j] - node.value[j / f]).exp()).collect());
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, n) = (node.shape[0], node.shape[1]);
                let gm = Mat::new(g, m, n);
                let bm = Mat::new(val(*b), sb[0], sb[1]);
                let am = Mat::new(val(*a), sa[0], sa[1]);
                // c = a·b: da = g·bᵀ, db = aᵀ·g ; c = a·bᵀ: da = g·b, db = gᵀ·a
                if *trans_b {
                    send(*a, matmul(gm, bm));
                    send(*b, matmul(gm.t(), am));
                } else {
                    send(*a, matmul(gm, bm.t()));
                    send(*b, matmul(am.t(), gm));
                }
            }
            Op::Affine { x, w, b } => {
                let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
                let (rows, out) = (node.shape[0], node.shape[1]);
                let gm = Mat::new(g, rows, out);
                send(*x, matmul(gm, Mat::new(val(*w), sw[0], sw[1])));
                send(*w, matmul(gm.t(), Mat::new(val(*x), sx[0], sx[1])));
                if let Some(b) = b {
                    let mut db = vec![0.0; out];
                    g.chunks(out).for_each(|r| db.iter_mut().zip(r).for_each(|(a, v)| *a += v));
                    send(*b, db);
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let sw = &self.nodes[w.0].shape;
                let d = ConvDims { cin: sw[1], cout: sw[0], kernel: sw[2], stride: *stride };
                let t = self.nodes[x.0].shape[1];
                let (dx, dw, db) = kernels::conv1d_backward(g, val(*x), t, val(*w), &d);
                send(*x, dx);
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::ConvTranspose1d { x, w, b, stride } => {
                let sw = &self.nodes[w.0].shape;
                let d = ConvDims { cin: sw[0], cout: sw[1], kernel: sw[2], stride: *stride };
                let frames = self.nodes[x.0].shape[1];
                let (dx, dw, db) = kernels::convt_backward(g, val(*x), frames, val(*w), &d);
                send(*x, dx);
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::LayerNorm { x, g: gain, b, xhat, rstd } => {
                let f = *node.shape.last().unwrap();
                let gv = val(*gain);
                let mut dg = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut dx = vec![0.0; g.len()];
                for (r, (gr, xr)) in g.chunks(f).zip(xhat.chunks(f)).enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..f {
                        dg[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                    }
                    let k = rstd[r] / f as f64;
                    for j in 0..f {
                        let dxh = gr[j] * gv[j];
                        dx[r * f + j] = k * (f as f64 * dxh - s1 - xr[j] * s2);
                    }
                }
                send(*x, dx);
                send(*gain, dg);
                send(*b, dbeta);
            }
            Op::L2Normalize { x, norms, eps } => {
                let f = *node.shape.last().unwrap();
                let xv = val(*x);
                let mut dx = vec![0.0; g.len()];
                for (r, gr) in g.chunks(f).enumerate() {
                    let yr = &node.value[r * f..(r + 1) * f];
                    let n = norms[r];
                    let raw = xv[r * f..(r + 1) * f].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw > *eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..f {
                            dx[r * f + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..f {
                            dx[r * f + j] = gr[j] / n;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let ext = self.nodes[v.0].shape[*axis];
                    let mut d = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    offset += ext;
                    send(*v, d);
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = &self.nodes[x.0].shape;
                let (outer, ext, inner) = split_axis(xs, *axis);
                let len = node.shape[*axis];
                let mut d = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, d);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Transpose { x, perm } => {
                let (d, _) = permute(g, &node.shape, &invert(perm));
                send(*x, d);
            }
            Op::Flip(x) => {
                let inner: usize = node.shape[1..].iter().product();
                send(*x, g.chunks(inner).rev().flatten().copied().collect());
            }
            Op::Gather { x, rows } => {
                let inner: usize = node.shape[1..].iter().product();
                let mut d = vec![0.0; val(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    d[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                        .for_each(|(a, b)| *a += b);
                }
                send(*x, d);
            }
            Op::Chunk { x, geom } => send(*x, kernels::chunk_backward(g, node.shape[0], geom)),
            Op::OverlapAdd { x, geom } => send(*x, kernels::overlap_add_backward(g, node.shape[0], geom)),
            Op::Gru { gx, w, b, cache } => {
                let d = GruDims { steps: node.shape[0], batch: node.shape[1], hidden: node.shape[2] };
                let (dgx, dw, db) = kernels::gru_backward(g, &node.value, val(*w), cache, &d);
                send(*gx, dgx);
                send(*w, dw);
                send(*b, db);
            }
            Op::Attention { q, k, v, probs } => {
                let s = &node.shape;
                let (dq, dk, dv) = kernels::attention_backward(g, val(*q), val(*k), val(*v), probs, s[0], s[1], s[2]);
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap().with_grad()).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[3], vec![0.3, -2.0, 5.0]).unwrap().with_grad()).unwrap();
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::new();
        let x = g.constant(&[2], vec![3.0, 4.0]).unwrap();
        let y = g.l2_normalize(x, 0, 1e-12).unwrap();
        let v = g.value(y);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!((v[0] * v[0] + v[1] * v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conv_length_formula() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 32000], vec![0.0; 32000]).unwrap();
        let w = g.constant(&[4, 1, 16], vec![0.1; 64]).unwrap();
        let y = g.conv1d(x, w, None, 8).unwrap();
        assert_eq!(g.shape(y), &[4, 3999]);
        let wt = g.constant(&[4, 1, 16], vec![0.1; 64]).unwrap();
        let z = g.conv1d_transpose(y, wt, None, 8).unwrap();
        assert_eq!(g.shape(z), &[1, 32000]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::new();
        let a = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        match g.add(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape error, got {other:?}"),
        }
        let x = g.constant(&[1, 8], vec![0.0; 8]).unwrap();
        let w = g.constant(&[2, 1, 16], vec![0.0; 32]).unwrap();
        assert!(matches!(g.conv1d(x, w, None, 8), Err(Error::Shape { op: "conv1d", .. })));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad()).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn log_of_zero_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(&[1], vec![0.0]).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut params = Params::new();
        let used = params.add("used", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let unused = params.add("unused", Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let u = g.param(&params, used).unwrap();
        let _ = g.param(&params, unused).unwrap();
        let s = g.sum(u).unwrap();
        let grads = g.backward(s).unwrap();
        g.accumulate(&grads, &mut params);
        let all = params.grads();
        assert_eq!(all[1], vec![0.0, 0.0]);
        assert_eq!(all[0], vec![1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut params = Params::new();
        let p = params.add("p", Tensor::new(&[1], vec![3.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&params, p).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        for _ in 0..2 {
            let grads = g.backward(s).unwrap();
            g.accumulate(&grads, &mut params);
        }
        assert_eq!(params.get(p).grad.as_deref(), Some(&[12.0][..]));
    }

    #[test]
    fn transpose_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(&[2, 3, 4], data.clone()).unwrap();
        let y = g.transpose(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(g.value(y)[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = g.transpose(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), data.as_slice());
    }
}
