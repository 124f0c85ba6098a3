//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Nodes are
//! appended in evaluation order, so append order is a topological order and
//! [`Tape::backward`] simply walks the nodes from last to first. The tape is
//! meant to be dropped after one forward/backward cycle.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::param::ParamId;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    /// tanh approximation.
    Gelu,
    Sigmoid,
    Relu,
    Abs,
    Exp,
    Log,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    Reshape(Var),
    Permute(Var, [usize; 4]),
    BroadcastTo(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Upsample2x(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    SigmoidFocal { logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_vec(self.shape(v), g.clone()).expect("grad length"))
    }

    pub(crate) fn param_leaves(&self) -> &[(Var, ParamId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradient (used for inputs under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub(crate) fn param_leaf(&mut self, t: Tensor, id: ParamId) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((v, id));
        v
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(sa)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.map(x, |v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.map(x, |v| v + s);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::from_vec(v.shape(), v.data().iter().map(|&e| f(e)).collect()).expect("same length")
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Var {
        let t = self.map(x, |v| unary_fwd(u, v));
        let rg = self.rg(x);
        self.push(t, Op::Unary(x, u), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    /// Sum of all elements, as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Output axis `d` takes input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 4]) -> Result<Var> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p >= 4 || seen[p] {
                return Err(Error::InvalidArgument(format!("bad permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let src = self.value(x);
        let is = src.shape().0;
        let os = Shape([is[perm[0]], is[perm[1]], is[perm[2]], is[perm[3]]]);
        let mut out = vec![0.0; src.numel()];
        permute_into(src.data(), is, perm, &mut out, false);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(os, out)?, Op::Permute(x, perm), rg))
    }

    /// Repeats axes of extent 1 up to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let is = self.shape(x).0;
        for d in 0..4 {
            if is[d] != shape.0[d] && is[d] != 1 {
                return shape_err("broadcast_to", format!("{:?} -> {shape:?}", self.shape(x)));
            }
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(shape.numel());
        let st = strides(is);
        let [n, c, h, w] = shape.0;
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for z in 0..w {
                        let idx = [a, b, y, z];
                        let off: usize = (0..4).map(|d| if is[d] == 1 { 0 } else { idx[d] * st[d] }).sum();
                        out.push(src[off]);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::BroadcastTo(x), rg))
    }

    /// `x + b` where `b` broadcasts along its unit axes.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        let bb = if self.shape(b) == s { b } else { self.broadcast_to(b, s)? };
        self.add(x, bb)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis >= 4 {
            return Err(Error::InvalidArgument("concat needs parts and axis < 4".into()));
        }
        let first = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p).0;
            for d in 0..4 {
                if d != axis && s[d] != first[d] {
                    return shape_err("concat", format!("{:?} vs {:?} along axis {axis}", Shape(first), Shape(s)));
                }
            }
            total += s[axis];
        }
        let mut os = first;
        os[axis] = total;
        let (outer, inner) = Shape(os).outer_inner(axis);
        let mut out = vec![0.0; Shape(os).numel()];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p).0[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let d0 = (o * total + offset) * inner;
                let s0 = o * len * inner;
                out[d0..d0 + len * inner].copy_from_slice(&src[s0..s0 + len * inner]);
            }
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(Shape(os), out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let is = self.shape(x);
        if axis >= 4 || start + len > is.0[axis] {
            return shape_err("slice", format!("[{start}, {}) of axis {axis} in {is:?}", start + len));
        }
        let (outer, inner) = is.outer_inner(axis);
        let total = is.0[axis];
        let mut os = is.0;
        os[axis] = len;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s0 = (o * total + start) * inner;
            out.extend_from_slice(&src[s0..s0 + len * inner]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(Shape(os), out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.shape(x).c();
        if sizes.iter().sum::<usize>() != c {
            return shape_err("split_channels", format!("sizes {sizes:?} do not sum to {c}"));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, 1, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Selects rows (flattened over the leading three axes) into a
    /// `(1, 1, rows.len(), w)` tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let n_rows = s.n() * s.c() * s.h();
        let w = s.w();
        if let Some(&r) = rows.iter().find(|&&r| r >= n_rows) {
            return shape_err("gather_rows", format!("row {r} out of {n_rows}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(Shape::new(1, 1, rows.len(), w), out)?,
            Op::GatherRows { x, rows: rows.to_vec() },
            rg,
        ))
    }

    // ---- linear algebra ---------------------------------------------------

    /// Batched product over the leading `(n, c)` axes of the trailing matrices.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n() != sb.n() || sa.c() != sb.c() {
            return shape_err("matmul", format!("batch axes {sa:?} vs {sb:?}"));
        }
        let (m, ka) = if ta { (sa.w(), sa.h()) } else { (sa.h(), sa.w()) };
        let (kb, n) = if tb { (sb.w(), sb.h()) } else { (sb.h(), sb.w()) };
        if ka != kb {
            return shape_err("matmul", format!("inner dims {ka} vs {kb} ({sa:?} x {sb:?})"));
        }
        let batch = sa.n() * sa.c();
        let os = Shape::new(sa.n(), sa.c(), m, n);
        let mut out = vec![0.0; os.numel()];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                ta,
                tb,
                m,
                n,
                ka,
                1.0,
                &ad[i * m * ka..(i + 1) * m * ka],
                &bd[i * ka * n..(i + 1) * ka * n],
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(os, out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Plain 2-D product of `(1,1,r,k)` and `(1,1,k,s)` matrices.
    pub fn matmul2d(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n() * sa.c() != 1 || sb.n() * sb.c() != 1 {
            return shape_err("matmul2d", format!("expected matrix views, got {sa:?} x {sb:?}"));
        }
        self.matmul(a, b, false, false)
    }

    /// Row-wise affine map: every length-`d_in` row of `x` times `w`
    /// `(1,1,d_in,d_out)` plus optional bias `(1,1,1,d_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (din, dout) = (sw.h(), sw.w());
        if sw.n() * sw.c() != 1 || sx.w() != din {
            return shape_err("linear", format!("input {sx:?} with weight {sw:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != Shape::new(1, 1, 1, dout) {
                return shape_err("linear", format!("bias {:?} for d_out {dout}", self.shape(b)));
            }
        }
        let rows = sx.numel() / din.max(1);
        let os = Shape::new(sx.n(), sx.c(), sx.h(), dout);
        let mut out = vec![0.0; os.numel()];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        gemm(false, false, rows, dout, din, 1.0, self.value(x).data(), self.value(w).data(), 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(os, out)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution with zero padding. `w` is `(c_out, c_in, k, k)`, the
    /// optional bias `(1, c_out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let [n, c_in, h, wd] = sx.0;
        let [c_out, wc_in, k, k2] = sw.0;
        if wc_in != c_in || k != k2 {
            return shape_err("conv2d", format!("input {sx:?} with weight {sw:?}"));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err("conv2d", format!("kernel {k} stride {stride} pad {pad} on {sx:?}"));
        }
        if stride == 2 && (h % 2 != 0 || wd % 2 != 0) {
            return shape_err("conv2d", format!("stride 2 needs even extents, got {h}x{wd}"));
        }
        if let Some(b) = b {
            if self.shape(b) != Shape::new(1, c_out, 1, 1) {
                return shape_err("conv2d", format!("bias {:?} for c_out {c_out}", self.shape(b)));
            }
        }
        let g = ConvGeom { c_in, h, w: wd, k, stride, pad };
        let (ho, wo) = g.out_hw();
        let hw = ho * wo;
        let rows = g.col_rows();
        let os = Shape::new(n, c_out, ho, wo);
        let mut out = vec![0.0; os.numel()];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let pointwise = g.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; n * rows * hw] };
        for i in 0..n {
            let img = &xd[i * c_in * h * wd..(i + 1) * c_in * h * wd];
            let col: &[f64] = if pointwise {
                img
            } else {
                let dst = &mut cols[i * rows * hw..(i + 1) * rows * hw];
                im2col(&g, img, dst);
                dst
            };
            let y = &mut out[i * c_out * hw..(i + 1) * c_out * hw];
            if let Some(b) = b {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    y[co * hw..(co + 1) * hw].fill(bv);
                }
            }
            gemm(false, false, c_out, hw, rows, 1.0, wdat, col, 1.0, y);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(os, out)?, Op::Conv2d { x, w, b, stride, pad, cols }, rg))
    }

    // ---- normalization ----------------------------------------------------

    /// Batch norm with statistics over `(n, h, w)` per channel. Returns the
    /// normalized output and the batch statistics for running-stat updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let s = self.shape(x);
        let [n, c, h, w] = s.0;
        self.check_channel_param("batch_norm", gamma, c)?;
        self.check_channel_param("batch_norm", beta, c)?;
        let count = n * h * w;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                sum += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let mu = sum / count as f64;
            let mut sq = 0.0;
            for i in 0..n {
                sq += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = sq / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let unbiased = if count > 1 {
            var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
        } else {
            var
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_vec(s, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true },
            rg,
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Batch norm using fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let c = s.c();
        self.check_channel_param("batch_norm", gamma, c)?;
        self.check_channel_param("batch_norm", beta, c)?;
        if mean.len() != c || var.len() != c {
            return shape_err("batch_norm", format!("running stats for {} channels, input has {c}", mean.len()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, mean, &inv_std);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_vec(s, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false },
            rg,
        ))
    }

    fn check_channel_param(&self, op: &'static str, p: Var, c: usize) -> Result<()> {
        if self.value(p).numel() != c {
            return shape_err(op, format!("parameter {:?} for {c} channels", self.shape(p)));
        }
        Ok(())
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = self.shape(x).0;
        let hw = h * w;
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        (xhat, out)
    }

    /// Layer norm over the last axis; `gamma`, `beta` hold `w` values.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let d = s.w();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return shape_err("layer_norm", format!("affine params for width {d}"));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = s.numel() / d.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::from_vec(s, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let d = s.w();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        if d > 0 {
            for (src, dst) in xd.chunks(d).zip(out.chunks_mut(d)) {
                let mx = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = (v - mx).exp();
                    z += *o;
                }
                for o in dst.iter_mut() {
                    *o /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(s, out).expect("same len"), Op::Softmax(x), rg)
    }

    // ---- resampling -------------------------------------------------------

    /// Bilinear ×2 upsampling with half-pixel centers and edge clamping:
    /// source coordinate `(dst + 0.5) / 2 − 0.5`, clamped to `[0, extent − 1]`.
    pub fn upsample_bilinear_x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.0;
        if h == 0 || w == 0 {
            return shape_err("upsample_bilinear_x2", format!("empty spatial extent {s:?}"));
        }
        let ty = bilinear_taps(h);
        let tx = bilinear_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(Shape::new(n, c, oh, ow), out)?, Op::Upsample2x(x), rg))
    }

    // ---- losses -----------------------------------------------------------

    /// Summed sigmoid focal loss against fixed binary targets.
    pub fn sigmoid_focal_sum(&mut self, logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64) -> Result<Var> {
        let xd = self.value(logits).data();
        if targets.len() != xd.len() {
            return shape_err("sigmoid_focal", format!("{} targets for {} logits", targets.len(), xd.len()));
        }
        let total: f64 = xd.iter().zip(&targets).map(|(&x, &t)| focal_term(x, t, alpha, gamma)).sum();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(total), Op::SigmoidFocal { logits, targets, alpha, gamma }, rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Node gradients from any previous
    /// sweep on this tape are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(Error::NotScalar(ls.0));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            backprop(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn strides(s: [usize; 4]) -> [usize; 4] {
    [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1]
}

/// Writes the permuted copy of `src` (shape `is`) into `out`; with
/// `inverse`, scatters `src` (already in permuted layout) back instead.
fn permute_into(src: &[f64], is: [usize; 4], perm: [usize; 4], out: &mut [f64], inverse: bool) {
    let ist = strides(is);
    let os = [is[perm[0]], is[perm[1]], is[perm[2]], is[perm[3]]];
    let mut o = 0;
    for a in 0..os[0] {
        for b in 0..os[1] {
            for c in 0..os[2] {
                let base = a * ist[perm[0]] + b * ist[perm[1]] + c * ist[perm[2]];
                for d in 0..os[3] {
                    let i = base + d * ist[perm[3]];
                    if inverse {
                        out[i] += src[o];
                    } else {
                        out[o] = src[i];
                    }
                    o += 1;
                }
            }
        }
    }
}

/// Per-output-index `(i0, i1, frac)` for ×2 half-pixel bilinear sampling.
pub(crate) fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|d| {
            let src = ((d as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_fwd(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Silu => x * sigmoid(x),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        Unary::Sigmoid => sigmoid(x),
        Unary::Relu => x.max(0.0),
        Unary::Abs => x.abs(),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
    }
}

fn unary_grad(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Gelu => {
            let inner = GELU_C * (x + 0.044715 * x * x * x);
            let t = inner.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Abs => x.signum(),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
    }
}

fn focal_term(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    // ln p = -softplus(-x), ln(1-p) = -softplus(x)
    if t > 0.5 {
        alpha * (1.0 - p).powf(gamma) * softplus(-x)
    } else {
        (1.0 - alpha) * p.powf(gamma) * softplus(x)
    }
}

fn focal_grad(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    if t > 0.5 {
        let log_p = -softplus(-x);
        alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p))
    } else {
        let log_q = -softplus(x);
        -(1.0 - alpha) * p.powf(gamma) * (gamma * (1.0 - p) * log_q - p)
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn acc_with(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
    if let Some(buf) = acc(nodes, grads, v) {
        for (i, e) in buf.iter_mut().enumerate() {
            *e += f(i);
        }
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_with(nodes, grads, *a, |k| g[k]);
            acc_with(nodes, grads, *b, |k| g[k]);
        }
        Op::Sub(a, b) => {
            acc_with(nodes, grads, *a, |k| g[k]);
            acc_with(nodes, grads, *b, |k| -g[k]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_with(nodes, grads, *a, |k| g[k] * bv[k]);
            acc_with(nodes, grads, *b, |k| g[k] * av[k]);
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_with(nodes, grads, *a, |k| g[k] / bv[k]);
            acc_with(nodes, grads, *b, |k| -g[k] * av[k] / (bv[k] * bv[k]));
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_with(nodes, grads, *a, |k| if av[k] <= bv[k] { g[k] } else { 0.0 });
            acc_with(nodes, grads, *b, |k| if av[k] <= bv[k] { 0.0 } else { g[k] });
        }
        Op::Maximum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_with(nodes, grads, *a, |k| if av[k] >= bv[k] { g[k] } else { 0.0 });
            acc_with(nodes, grads, *b, |k| if av[k] >= bv[k] { 0.0 } else { g[k] });
        }
        Op::Scale(x, s) => acc_with(nodes, grads, *x, |k| g[k] * s),
        Op::AddScalar(x) => acc_with(nodes, grads, *x, |k| g[k]),
        Op::Unary(x, u) => {
            let (xv, yv) = (val(*x), node.value.data());
            acc_with(nodes, grads, *x, |k| g[k] * unary_grad(*u, xv[k], yv[k]));
        }
        Op::Sum(x) => acc_with(nodes, grads, *x, |_| g[0]),
        Op::Reshape(x) => acc_with(nodes, grads, *x, |k| g[k]),
        Op::Permute(x, perm) => {
            let is = nodes[x.0].value.shape().0;
            if let Some(buf) = acc(nodes, grads, *x) {
                permute_into(g, is, *perm, buf, true);
            }
        }
        Op::BroadcastTo(x) => {
            let is = nodes[x.0].value.shape().0;
            let os = node.value.shape().0;
            let st = strides(is);
            if let Some(buf) = acc(nodes, grads, *x) {
                let mut o = 0;
                for a in 0..os[0] {
                    for b in 0..os[1] {
                        for c in 0..os[2] {
                            for d in 0..os[3] {
                                let idx = [a, b, c, d];
                                let off: usize = (0..4).map(|k| if is[k] == 1 { 0 } else { idx[k] * st[k] }).sum();
                                buf[off] += g[o];
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let os = node.value.shape();
            let (outer, inner) = os.outer_inner(*axis);
            let total = os.0[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.shape().0[*axis];
                if let Some(buf) = acc(nodes, grads, p) {
                    for o in 0..outer {
                        let s0 = (o * total + offset) * inner;
                        let d0 = o * len * inner;
                        for k in 0..len * inner {
                            buf[d0 + k] += g[s0 + k];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let is = nodes[x.0].value.shape();
            let (outer, inner) = is.outer_inner(*axis);
            let total = is.0[*axis];
            let len = node.value.shape().0[*axis];
            if let Some(buf) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    let d0 = (o * total + start) * inner;
                    let s0 = o * len * inner;
                    for k in 0..len * inner {
                        buf[d0 + k] += g[s0 + k];
                    }
                }
            }
        }
        Op::GatherRows { x, rows } => {
            let w = node.value.shape().w();
            if let Some(buf) = acc(nodes, grads, *x) {
                for (j, &r) in rows.iter().enumerate() {
                    for k in 0..w {
                        buf[r * w + k] += g[j * w + k];
                    }
                }
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k) = if *ta { (sa.w(), sa.h()) } else { (sa.h(), sa.w()) };
            let n = if *tb { sb.h() } else { sb.w() };
            let batch = sa.n() * sa.c();
            let (ad, bd) = (val(*a), val(*b));
            if let Some(buf) = acc(nodes, grads, *a) {
                for i in 0..batch {
                    let gc = &g[i * m * n..(i + 1) * m * n];
                    let bb = &bd[i * k * n..(i + 1) * k * n];
                    let da = &mut buf[i * m * k..(i + 1) * m * k];
                    if *ta {
                        // dA (k×m) = op(B) · dCᵀ
                        gemm(*tb, true, k, m, n, 1.0, bb, gc, 1.0, da);
                    } else {
                        // dA (m×k) = dC · op(B)ᵀ
                        gemm(false, !*tb, m, k, n, 1.0, gc, bb, 1.0, da);
                    }
                }
            }
            if let Some(buf) = acc(nodes, grads, *b) {
                for i in 0..batch {
                    let gc = &g[i * m * n..(i + 1) * m * n];
                    let aa = &ad[i * m * k..(i + 1) * m * k];
                    let db = &mut buf[i * k * n..(i + 1) * k * n];
                    if *tb {
                        // dB (n×k) = dCᵀ · op(A)
                        gemm(true, *ta, n, k, m, 1.0, gc, aa, 1.0, db);
                    } else {
                        // dB (k×n) = op(A)ᵀ · dC
                        gemm(!*ta, false, k, n, m, 1.0, aa, gc, 1.0, db);
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let sw = nodes[w.0].value.shape();
            let (din, dout) = (sw.h(), sw.w());
            let rows = node.value.numel() / dout.max(1);
            if let Some(buf) = acc(nodes, grads, *x) {
                gemm(false, true, rows, din, dout, 1.0, g, val(*w), 1.0, buf);
            }
            if let Some(buf) = acc(nodes, grads, *w) {
                gemm(true, false, din, dout, rows, 1.0, val(*x), g, 1.0, buf);
            }
            if let Some(b) = b {
                if let Some(buf) = acc(nodes, grads, *b) {
                    for r in 0..rows {
                        for (e, gv) in buf.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *e += gv;
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, stride, pad, cols } => {
            let [n, c_in, h, wd] = nodes[x.0].value.shape().0;
            let [c_out, _, k, _] = nodes[w.0].value.shape().0;
            let geom = ConvGeom { c_in, h, w: wd, k, stride: *stride, pad: *pad };
            let (ho, wo) = geom.out_hw();
            let hw = ho * wo;
            let rows = geom.col_rows();
            let pointwise = geom.is_pointwise();
            let xd = val(*x);
            if let Some(buf) = acc(nodes, grads, *w) {
                for i in 0..n {
                    let col = if pointwise {
                        &xd[i * c_in * h * wd..(i + 1) * c_in * h * wd]
                    } else {
                        &cols[i * rows * hw..(i + 1) * rows * hw]
                    };
                    gemm(false, true, c_out, rows, hw, 1.0, &g[i * c_out * hw..(i + 1) * c_out * hw], col, 1.0, buf);
                }
            }
            if let Some(b) = b {
                if let Some(buf) = acc(nodes, grads, *b) {
                    for i in 0..n {
                        for (co, e) in buf.iter_mut().enumerate() {
                            *e += g[(i * c_out + co) * hw..(i * c_out + co + 1) * hw].iter().sum::<f64>();
                        }
                    }
                }
            }
            let wdat = val(*w);
            if let Some(buf) = acc(nodes, grads, *x) {
                let mut dcol = vec![0.0; if pointwise { 0 } else { rows * hw }];
                for i in 0..n {
                    let gy = &g[i * c_out * hw..(i + 1) * c_out * hw];
                    let dx = &mut buf[i * c_in * h * wd..(i + 1) * c_in * h * wd];
                    if pointwise {
                        gemm(true, false, rows, hw, c_out, 1.0, wdat, gy, 1.0, dx);
                    } else {
                        gemm(true, false, rows, hw, c_out, 1.0, wdat, gy, 0.0, &mut dcol);
                        col2im(&geom, &dcol, dx);
                    }
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let [n, c, h, w] = node.value.shape().0;
            let hw = h * w;
            let count = (n * hw) as f64;
            let gam = val(*gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        sum_g[ch] += g[j];
                        sum_gx[ch] += g[j] * xhat[j];
                    }
                }
            }
            if let Some(buf) = acc(nodes, grads, *gamma) {
                for (e, v) in buf.iter_mut().zip(&sum_gx) {
                    *e += v;
                }
            }
            if let Some(buf) = acc(nodes, grads, *beta) {
                for (e, v) in buf.iter_mut().zip(&sum_g) {
                    *e += v;
                }
            }
            if let Some(buf) = acc(nodes, grads, *x) {
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let s = gam[ch] * inv_std[ch];
                        for j in base..base + hw {
                            buf[j] += if *batch_stats {
                                s * (g[j] - sum_g[ch] / count - xhat[j] * sum_gx[ch] / count)
                            } else {
                                s * g[j]
                            };
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = node.value.shape().w();
            let rows = inv_std.len();
            let gam = val(*gamma);
            if let Some(buf) = acc(nodes, grads, *gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(buf) = acc(nodes, grads, *beta) {
                for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g[r * d + j];
                    }
                }
            }
            if let Some(buf) = acc(nodes, grads, *x) {
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dxh = g[r * d + j] * gam[j];
                        s1 += dxh;
                        s2 += dxh * xhat[r * d + j];
                    }
                    for j in 0..d {
                        let dxh = g[r * d + j] * gam[j];
                        buf[r * d + j] += inv_std[r] * (dxh - s1 / d as f64 - xhat[r * d + j] * s2 / d as f64);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let d = node.value.shape().w();
            if let Some(buf) = acc(nodes, grads, *x) {
                if d > 0 {
                    for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
        }
        Op::Upsample2x(x) => {
            let [n, c, h, w] = nodes[x.0].value.shape().0;
            let (oh, ow) = (2 * h, 2 * w);
            let ty = bilinear_taps(h);
            let tx = bilinear_taps(w);
            if let Some(buf) = acc(nodes, grads, *x) {
                for p in 0..n * c {
                    let gsrc = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut buf[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gsrc[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
            }
        }
        Op::SigmoidFocal { logits, targets, alpha, gamma } => {
            let xv = val(*logits);
            acc_with(nodes, grads, *logits, |k| g[0] * focal_grad(xv[k], targets[k], *alpha, *gamma));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn t(shape: Shape, v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_mul_values() {
        let mut tp = Tape::new();
        let a = tp.constant(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]));
        let b = tp.constant(t(Shape::new(1, 1, 1, 2), &[3.0, 4.0]));
        let s = tp.add(a, b).unwrap();
        assert_eq!(tp.value(s).data(), &[4.0, 6.0]);
        let ones = tp.constant(Tensor::full(Shape::new(1, 1, 1, 2), 1.0));
        let m = tp.mul(a, ones).unwrap();
        assert_eq!(tp.value(m).data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tp = Tape::new();
        let a = tp.constant(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        let b = tp.constant(Tensor::zeros(Shape::new(1, 1, 2, 1)));
        assert!(tp.add(a, b).is_err());
        assert!(tp.mul(a, b).is_err());
    }

    #[test]
    fn mul_gradient_is_cross_multiplied() {
        let mut tp = Tape::new();
        let x = tp.input(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]));
        let y = tp.input(t(Shape::new(1, 1, 1, 2), &[3.0, 5.0]));
        let p = tp.mul(x, y).unwrap();
        let l = tp.sum(p);
        tp.backward(l).unwrap();
        assert_eq!(tp.grad(x).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(tp.grad(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tp = Tape::new();
        let x = tp.input(Tensor::full(Shape::new(1, 1, 2, 2), 0.3));
        let l = tp.sum(x);
        tp.backward(l).unwrap();
        assert_eq!(tp.grad(x).unwrap().data(), &[1.0; 4]);

        let mut tp = Tape::new();
        let x = tp.input(t(Shape::new(1, 1, 1, 2), &[1.0, -2.0]));
        let sq = tp.mul(x, x).unwrap();
        let l = tp.sum(sq);
        tp.backward(l).unwrap();
        assert_eq!(tp.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tp = Tape::new();
        assert!(tp.backward(Var(0)).is_err());
        let x = tp.input(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        assert!(matches!(tp.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tp = Tape::new();
        let c = tp.constant(Tensor::full(Shape::new(1, 1, 1, 3), 2.0));
        let x = tp.input(Tensor::full(Shape::new(1, 1, 1, 3), 1.0));
        let p = tp.mul(c, x).unwrap();
        let l = tp.sum(p);
        tp.backward(l).unwrap();
        assert!(tp.grad(c).is_none());
        assert_eq!(tp.grad(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn concat_split_shapes() {
        let mut tp = Tape::new();
        let a = tp.constant(Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
        let b = tp.constant(Tensor::full(Shape::new(1, 3, 1, 1), 2.0));
        let c = tp.concat_channels(&[a, b]).unwrap();
        assert_eq!(tp.shape(c), Shape::new(1, 5, 1, 1));
        let parts = tp.split_channels(c, &[2, 3]).unwrap();
        assert_eq!(tp.value(parts[0]), tp.value(a));
        assert_eq!(tp.value(parts[1]), tp.value(b));
        assert!(tp.split_channels(c, &[2, 2]).is_err());
        let d = tp.constant(Tensor::zeros(Shape::new(1, 1, 2, 1)));
        assert!(tp.concat_channels(&[a, d]).is_err());
    }

    #[test]
    fn matmul_hand_cases() {
        let mut tp = Tape::new();
        let a = tp.constant(t(Shape::matrix(2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let b = tp.constant(t(Shape::matrix(2, 1), &[1.0, 1.0]));
        let c = tp.matmul2d(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[3.0, 7.0]);

        let m = Tensor::create(Shape::matrix(3, 3), Init::Uniform { seed: 4, lo: -1.0, hi: 1.0 }).unwrap();
        let id = t(Shape::matrix(3, 3), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let (iv, mv) = (tp.constant(id), tp.constant(m.clone()));
        let p = tp.matmul2d(iv, mv).unwrap();
        assert_eq!(tp.value(p), &m);
        assert!(tp.matmul2d(a, mv).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::create(Shape::new(2, 3, 4, 5), Init::Uniform { seed: 1, lo: 0.0, hi: 1.0 }).unwrap());
        let p = tp.permute(x, [0, 2, 3, 1]).unwrap();
        assert_eq!(tp.shape(p), Shape::new(2, 4, 5, 3));
        assert_eq!(tp.value(p).at(1, 2, 3, 0), tp.value(x).at(1, 0, 2, 3));
        let q = tp.permute(p, [0, 3, 1, 2]).unwrap();
        assert_eq!(tp.value(q), tp.value(x));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::create(Shape::new(1, 2, 3, 7), Init::Normal { seed: 9, mean: 0.0, std: 3.0 }).unwrap());
        let y = tp.softmax(x);
        for row in tp.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn focal_saturates_on_confident_background() {
        let mut tp = Tape::new();
        let x = tp.input(Tensor::full(Shape::new(1, 1, 4, 3), -20.0));
        let l = tp.sigmoid_focal_sum(x, vec![0.0; 12], 0.25, 2.0).unwrap();
        assert!(tp.value(l).item() < 1e-15);
    }
}
