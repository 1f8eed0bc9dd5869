//! Eager reverse-mode tape.
//!
//! Every op evaluates immediately and appends a node; node indices are a
//! topological order, so one reverse sweep visits each node exactly once.

use super::conv::{self, ConvGeom};
use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::voxel::{coords, source_indices, stencil, voxel_center, AffineParams};
use rayon::prelude::*;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside log losses.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cin: usize, cout: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cin: usize, cout: usize },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    FrobSq(Var),
    Bce { pred: Var, target: Vec<f64> },
    L2 { pred: Var, target: Vec<f64>, weight: Option<Vec<f64>> },
    CrossEntropy { pred: Var, target: Vec<f64> },
    GridSample { vol: Var, theta: Var, r: usize },
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    Concat { xs: Vec<Var>, outer: usize },
    MaxAxis { x: Var, arg: Vec<usize>, mid: usize, inner: usize },
    BinarizeSt(Var),
    Softmax { x: Var, c: usize, inner: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Dense { b: None, .. } => "dense_nobias",
            Op::Dense { .. } => "dense",
            Op::MatMul { .. } => "matmul",
            Op::Conv { .. } => "conv3",
            Op::ConvT { .. } => "conv3_transpose",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::FrobSq(_) => "frob_sq",
            Op::Bce { .. } => "bce",
            Op::L2 { .. } => "l2",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GridSample { .. } => "grid_sample3",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::Concat { .. } => "concat",
            Op::MaxAxis { .. } => "max_axis",
            Op::BinarizeSt(_) => "binarize_st",
            Op::Softmax { .. } => "softmax",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation graph holding every intermediate value.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to the graph's differentiable leaves.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` is not a differentiable leaf reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Takes (or zero-creates) the gradient buffer of `v`; pair with [`put`].
fn take(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]))
}

fn put(grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
    let Some(buf) = buf else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&buf).for_each(|(a, b)| *a += b),
        slot => *slot = Some(buf),
    }
}

/// Adds `f(i)` to every entry of `v`'s gradient.
fn acc_with(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl Fn(usize) -> f64) {
    if let Some(mut buf) = take(grads, nodes, v) {
        buf.iter_mut().enumerate().for_each(|(i, s)| *s += f(i));
        put(grads, v, Some(buf));
    }
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

    /// Constant input: no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First node whose value contains a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| n.value.data.iter().any(|v| !v.is_finite()))
            .map(|i| (i, self.nodes[i].op.name()))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::shape(op, format!("unknown variable {}", v.0)));
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check(a, op)?;
        self.check(b, op)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn target_len(&self, pred: Var, target: &Tensor, op: &'static str) -> Result<()> {
        self.check(pred, op)?;
        if self.value(pred).len() != target.len() {
            return Err(Error::shape(
                op,
                format!("prediction {:?} vs target {:?}", self.shape(pred), target.shape),
            ));
        }
        Ok(())
    }

    /// `x · Wᵀ + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "dense";
        self.check(x, OP)?;
        self.check(w, OP)?;
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(OP, format!("input {xs:?} with weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * dout];
        gemm(n, din, dout, &self.value(x).data, false, &self.value(w).data, true, 0.0, &mut y);
        if let Some(b) = b {
            self.check(b, OP)?;
            if self.value(b).len() != dout {
                return Err(Error::shape(OP, format!("bias {:?} for {dout} outputs", self.shape(b))));
            }
            let bias = &self.value(b).data;
            for row in y.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        Ok(self.push(Tensor::new(vec![n, dout], y), Op::Dense { x, w, b }, g))
    }

    /// `A · B` for 2D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        self.check(a, OP)?;
        self.check(b, OP)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(OP, format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut y = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, 0.0, &mut y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], y), Op::MatMul { a, b }, g))
    }

    fn conv_operands(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        self.check(x, op)?;
        self.check(w, op)?;
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 5 || xs[2] != xs[3] || xs[3] != xs[4] {
            return Err(Error::shape(op, format!("input {xs:?} is not [N, C, D, D, D]")));
        }
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape(op, format!("weight {ws:?} is not [A, B, k, k, k]")));
        }
        if let Some(b) = b {
            self.check(b, op)?;
        }
        Ok((xs[0], xs[1], xs[2], ws[0], ws[1]))
    }

    /// Strided convolution; `x: [N, Cin, D, D, D]`, `W: [Cout, Cin, k, k, k]`, `b: [Cout]`.
    pub fn conv3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv3";
        let (n, cin, d, cout, wcin) = self.conv_operands(OP, x, w, b)?;
        if wcin != cin {
            return Err(Error::shape(OP, format!("weight expects {wcin} channels, input has {cin}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape(OP, format!("bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        let geom = ConvGeom::conv(d, self.shape(w)[2], stride, pad)?;
        let mut y = vec![0.0; n * cout * geom.o.pow(3)];
        conv::conv3_forward(
            &geom,
            cin,
            cout,
            &self.value(x).data,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
            &mut y,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        let o = geom.o;
        Ok(self.push(
            Tensor::new(vec![n, cout, o, o, o], y),
            Op::Conv { x, w, b, geom, cin, cout },
            g,
        ))
    }

    /// Transposed convolution; `x: [N, Cin, D, D, D]`, `W: [Cin, Cout, k, k, k]`, `b: [Cout]`.
    pub fn conv3_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "conv3_transpose";
        let (n, cin, d, wcin, cout) = self.conv_operands(OP, x, w, b)?;
        if wcin != cin {
            return Err(Error::shape(OP, format!("weight expects {wcin} channels, input has {cin}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape(OP, format!("bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        let geom = ConvGeom::transpose(d, self.shape(w)[2], stride, pad)?;
        let mut y = vec![0.0; n * cout * geom.d.pow(3)];
        conv::conv3t_forward(
            &geom,
            cin,
            cout,
            &self.value(x).data,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
            &mut y,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        let dd = geom.d;
        Ok(self.push(
            Tensor::new(vec![n, cout, dd, dd, dd], y),
            Op::ConvT { x, w, b, geom, cin, cout },
            g,
        ))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(x, op.name())?;
        let v = self.value(x);
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| f(a)).collect());
        let g = self.any_grad(&[x]);
        Ok(self.push(t, op, g))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), |a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |a| c * a)
    }

    /// Forward: `1` where `x ≥ τ`, else `0`. Backward: identity (straight-through).
    pub fn binarize_st(&mut self, x: Var, tau: f64) -> Result<Var> {
        self.unary(x, Op::BinarizeSt(x), |a| if a >= tau { 1.0 } else { 0.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(x, "reshape")?;
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::shape("reshape", format!("{:?} into {shape:?}", v.shape)));
        }
        let t = Tensor::new(shape, v.data.clone());
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), g))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x, "sum")?;
        let s = self.value(x).data.iter().sum();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), g))
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(&mut self, x: Var) -> Result<Var> {
        self.check(x, "frob_sq")?;
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::FrobSq(x), g))
    }

    /// Binary cross-entropy summed over all entries; `target` is constant.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.target_len(pred, target, "bce")?;
        let s = self
            .value(pred)
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| {
                let p = clamp_p(p);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let g = self.any_grad(&[pred]);
        Ok(self.push(Tensor::scalar(s), Op::Bce { pred, target: target.data.clone() }, g))
    }

    /// `Σ w_i (pred_i − target_i)²`, `w ≡ 1` when absent.
    pub fn l2(&mut self, pred: Var, target: &Tensor, weight: Option<&[f64]>) -> Result<Var> {
        self.target_len(pred, target, "l2")?;
        if let Some(w) = weight {
            if w.len() != target.len() {
                return Err(Error::shape("l2", format!("{} weights for {} values", w.len(), target.len())));
            }
        }
        let p = &self.value(pred).data;
        let s = (0..p.len())
            .map(|i| weight.map_or(1.0, |w| w[i]) * (p[i] - target.data[i]).powi(2))
            .sum();
        let g = self.any_grad(&[pred]);
        let op = Op::L2 {
            pred,
            target: target.data.clone(),
            weight: weight.map(<[f64]>::to_vec),
        };
        Ok(self.push(Tensor::scalar(s), op, g))
    }

    /// `−Σ t ln p` with `p` clamped; `target` is constant.
    pub fn cross_entropy(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.target_len(pred, target, "cross_entropy")?;
        let s = self
            .value(pred)
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * clamp_p(p).ln() })
            .sum();
        let g = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::CrossEntropy { pred, target: target.data.clone() },
            g,
        ))
    }

    /// Softmax over axis 1 of `[N, C, ...]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x, "softmax")?;
        let v = self.value(x);
        if v.shape.len() < 2 {
            return Err(Error::shape("softmax", format!("{:?} has no channel axis", v.shape)));
        }
        let c = v.shape[1];
        let inner: usize = v.shape[2..].iter().product();
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v.data.chunks(c * inner).zip(out.chunks_mut(c * inner)) {
            for i in 0..inner {
                let m = (0..c).map(|ch| src[ch * inner + i]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[ch * inner + i] - m).exp();
                    dst[ch * inner + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    dst[ch * inner + i] /= z;
                }
            }
        }
        let t = Tensor::new(v.shape.clone(), out);
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax { x, c, inner }, g))
    }

    /// Rows `idx` of `x` along the leading axis; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x, "gather_rows")?;
        let v = self.value(x);
        let (n, len) = (v.rows(), v.row_len());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let mut shape = v.shape.clone();
        shape[0] = idx.len();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data), Op::GatherRows { x, idx: idx.to_vec() }, g))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = *xs.first().ok_or_else(|| Error::shape(OP, "no operands"))?;
        for &x in xs {
            self.check(x, OP)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(OP, format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape(OP, format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let g = self.any_grad(xs);
        Ok(self.push(Tensor::new(shape, data), Op::Concat { xs: xs.to_vec(), outer }, g))
    }

    /// Maximum over `axis` (removed from the shape); ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x, "max_axis")?;
        let v = self.value(x);
        if axis >= v.shape.len() {
            return Err(Error::shape("max_axis", format!("axis {axis} of {:?}", v.shape)));
        }
        let mid = v.shape[axis];
        let outer: usize = v.shape[..axis].iter().product();
        let inner: usize = v.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for m in 1..mid {
                    if v.data[(o * mid + m) * inner + i] > v.data[(o * mid + best) * inner + i] {
                        best = m;
                    }
                }
                arg.push(best);
                out.push(v.data[(o * mid + best) * inner + i]);
            }
        }
        let mut shape = v.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out), Op::MaxAxis { x, arg, mid, inner }, g))
    }

    /// Trilinear resampling of `vol: [N, …]` (each row an `R³` volume) under `theta: [N, 12]`.
    pub fn grid_sample3(&mut self, vol: Var, theta: Var) -> Result<Var> {
        const OP: &str = "grid_sample3";
        self.check(vol, OP)?;
        self.check(theta, OP)?;
        let (v, th) = (self.value(vol), self.value(theta));
        let n = v.rows();
        let len = v.row_len();
        let r = (len as f64).cbrt().round() as usize;
        if r * r * r != len {
            return Err(Error::shape(OP, format!("rows of {:?} are not cubic volumes", v.shape)));
        }
        if th.len() != 12 * n {
            return Err(Error::shape(OP, format!("theta {:?} for {n} volumes", th.shape)));
        }
        if let Some(bad) = th.data.iter().find(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite transform parameter {bad}")));
        }
        let mut out = vec![0.0; v.len()];
        out.par_chunks_mut(len)
            .zip(v.data.par_chunks(len))
            .zip(th.data.par_chunks(12))
            .for_each(|((dst, src), p)| {
                let u = source_indices(r, &AffineParams::from_slice(p));
                for (o, ui) in dst.iter_mut().zip(u) {
                    let st = stencil(ui, r);
                    *o = (0..8).filter_map(|c| st.idx[c].map(|i| src[i] * st.w[c])).sum();
                }
            });
        let t = Tensor::new(v.shape.clone(), out);
        let g = self.any_grad(&[vol, theta]);
        Ok(self.push(t, Op::GridSample { vol, theta, r }, g))
    }

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("backward from unknown variable {}", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.value(loss).item().is_finite() {
            let (node, op) = self.first_non_finite().unwrap_or((loss.0, self.nodes[loss.0].op.name()));
            return Err(Error::NonFinite { node, op });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes[..];
        let val = |v: Var| &nodes[v.0].value.data;
        let y = &nodes[i].value.data;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (n, din) = (nodes[x.0].value.shape[0], nodes[x.0].value.shape[1]);
                let dout = nodes[w.0].value.shape[0];
                if let Some(mut dx) = take(grads, nodes, *x) {
                    gemm(n, dout, din, g, false, val(*w), false, 1.0, &mut dx);
                    put(grads, *x, Some(dx));
                }
                if let Some(mut dw) = take(grads, nodes, *w) {
                    gemm(dout, n, din, g, true, val(*x), false, 1.0, &mut dw);
                    put(grads, *w, Some(dw));
                }
                if let Some(b) = b {
                    acc_with(grads, nodes, *b, |j| g.iter().skip(j).step_by(dout).sum());
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let n = nodes[b.0].value.shape[1];
                if let Some(mut da) = take(grads, nodes, *a) {
                    gemm(m, n, k, g, false, val(*b), true, 1.0, &mut da);
                    put(grads, *a, Some(da));
                }
                if let Some(mut db) = take(grads, nodes, *b) {
                    gemm(k, m, n, val(*a), true, g, false, 1.0, &mut db);
                    put(grads, *b, Some(db));
                }
            }
            Op::Conv { x, w, b, geom, cin, cout } | Op::ConvT { x, w, b, geom, cin, cout } => {
                let mut dx = take(grads, nodes, *x);
                let mut dw = take(grads, nodes, *w);
                let mut db = b.and_then(|b| take(grads, nodes, b));
                let f = if matches!(nodes[i].op, Op::Conv { .. }) {
                    conv::conv3_backward
                } else {
                    conv::conv3t_backward
                };
                f(
                    geom,
                    *cin,
                    *cout,
                    val(*x),
                    val(*w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put(grads, *x, dx);
                put(grads, *w, dw);
                if let Some(b) = b {
                    put(grads, *b, db);
                }
            }
            Op::Relu(x) => acc_with(grads, nodes, *x, |j| if y[j] > 0.0 { g[j] } else { 0.0 }),
            Op::Sigmoid(x) => acc_with(grads, nodes, *x, |j| g[j] * y[j] * (1.0 - y[j])),
            Op::Add(a, b) => {
                acc_with(grads, nodes, *a, |j| g[j]);
                acc_with(grads, nodes, *b, |j| g[j]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc_with(grads, nodes, *a, |j| g[j] * vb[j]);
                acc_with(grads, nodes, *b, |j| g[j] * va[j]);
            }
            Op::Scale(x, c) => acc_with(grads, nodes, *x, |j| c * g[j]),
            Op::BinarizeSt(x) | Op::Reshape(x) => acc_with(grads, nodes, *x, |j| g[j]),
            Op::Sum(x) => acc_with(grads, nodes, *x, |_| g[0]),
            Op::FrobSq(x) => {
                let vx = val(*x);
                acc_with(grads, nodes, *x, |j| 2.0 * vx[j] * g[0]);
            }
            Op::Bce { pred, target } => {
                let p = val(*pred);
                acc_with(grads, nodes, *pred, |j| {
                    let pc = clamp_p(p[j]);
                    if pc != p[j] {
                        0.0
                    } else {
                        g[0] * (pc - target[j]) / (pc * (1.0 - pc))
                    }
                });
            }
            Op::L2 { pred, target, weight } => {
                let p = val(*pred);
                acc_with(grads, nodes, *pred, |j| {
                    let w = weight.as_ref().map_or(1.0, |w| w[j]);
                    g[0] * 2.0 * w * (p[j] - target[j])
                });
            }
            Op::CrossEntropy { pred, target } => {
                let p = val(*pred);
                acc_with(grads, nodes, *pred, |j| {
                    let pc = clamp_p(p[j]);
                    if pc != p[j] || target[j] == 0.0 {
                        0.0
                    } else {
                        -g[0] * target[j] / pc
                    }
                });
            }
            Op::Softmax { x, c, inner } => {
                let (c, inner) = (*c, *inner);
                let block = c * inner;
                // dx = y ⊙ (g − Σ_c y g)
                let mut dot = vec![0.0; y.len() / c];
                for (b, (yb, gb)) in y.chunks(block).zip(g.chunks(block)).enumerate() {
                    for ch in 0..c {
                        for k in 0..inner {
                            dot[b * inner + k] += yb[ch * inner + k] * gb[ch * inner + k];
                        }
                    }
                }
                acc_with(grads, nodes, *x, |j| {
                    let (b, k) = (j / block, j % inner);
                    y[j] * (g[j] - dot[b * inner + k])
                });
            }
            Op::GatherRows { x, idx } => {
                if let Some(mut dx) = take(grads, nodes, *x) {
                    let len = nodes[x.0].value.row_len();
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut dx[src * len..(src + 1) * len];
                        dst.iter_mut().zip(&g[r * len..(r + 1) * len]).for_each(|(a, b)| *a += b);
                    }
                    put(grads, *x, Some(dx));
                }
            }
            Op::Concat { xs, outer } => {
                let widths: Vec<usize> = xs.iter().map(|x| nodes[x.0].value.len() / outer).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (x, &w) in xs.iter().zip(&widths) {
                    acc_with(grads, nodes, *x, |j| {
                        let (o, k) = (j / w, j % w);
                        g[o * total + offset + k]
                    });
                    offset += w;
                }
            }
            Op::MaxAxis { x, arg, mid, inner } => {
                if let Some(mut dx) = take(grads, nodes, *x) {
                    for (j, &m) in arg.iter().enumerate() {
                        let (o, k) = (j / inner, j % inner);
                        dx[(o * mid + m) * inner + k] += g[j];
                    }
                    put(grads, *x, Some(dx));
                }
            }
            Op::GridSample { vol, theta, r } => {
                let r = *r;
                let len = r * r * r;
                let want_v = nodes[vol.0].needs_grad;
                let want_t = nodes[theta.0].needs_grad;
                let mut dvol = vec![0.0; if want_v { nodes[vol.0].value.len() } else { 0 }];
                let mut dth = vec![0.0; if want_t { nodes[theta.0].value.len() } else { 0 }];
                let src_all = val(*vol);
                let th_all = val(*theta);
                let half_r = r as f64 * 0.5;
                let per_sample = |s: usize, dv: &mut [f64], dt: &mut [f64]| {
                    let src = &src_all[s * len..(s + 1) * len];
                    let gs = &g[s * len..(s + 1) * len];
                    let u = source_indices(r, &AffineParams::from_slice(&th_all[12 * s..12 * s + 12]));
                    for (oi, ui) in u.into_iter().enumerate() {
                        let go = gs[oi];
                        if go == 0.0 {
                            continue;
                        }
                        let st = stencil(ui, r);
                        let mut du = [0.0; 3];
                        for c in 0..8 {
                            if let Some(idx) = st.idx[c] {
                                if !dv.is_empty() {
                                    dv[idx] += st.w[c] * go;
                                }
                                for (d, slot) in du.iter_mut().enumerate() {
                                    *slot += src[idx] * st.dw[c][d];
                                }
                            }
                        }
                        if dt.is_empty() {
                            continue;
                        }
                        let (x, yy, z) = coords(r, oi);
                        let o = [voxel_center(x, r), voxel_center(yy, r), voxel_center(z, r)];
                        for d in 0..3 {
                            let ds = go * du[d] * half_r;
                            for j in 0..3 {
                                dt[3 * d + j] += ds * o[j];
                            }
                            dt[9 + d] += ds;
                        }
                    }
                };
                match (want_v, want_t) {
                    (true, true) => dvol
                        .par_chunks_mut(len)
                        .zip(dth.par_chunks_mut(12))
                        .enumerate()
                        .for_each(|(s, (dv, dt))| per_sample(s, dv, dt)),
                    (true, false) => dvol
                        .par_chunks_mut(len)
                        .enumerate()
                        .for_each(|(s, dv)| per_sample(s, dv, &mut [])),
                    (false, true) => dth
                        .par_chunks_mut(12)
                        .enumerate()
                        .for_each(|(s, dt)| per_sample(s, &mut [], dt)),
                    (false, false) => {}
                }
                if want_v {
                    put(grads, *vol, Some(dvol));
                }
                if want_t {
                    put(grads, *theta, Some(dth));
                }
            }
        }
    }
}
