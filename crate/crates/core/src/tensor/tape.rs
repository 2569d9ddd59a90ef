//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op appends one node holding its forward value and enough context to run its
//! backward rule. Nodes are appended after their inputs, so the tape is always in
//! topological order and one reverse sweep visits each node after all of its consumers.

use super::kernels::{self, ConvGeom};
use super::{axis_blocks, strides, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias { x: Var, bias: Var, axis: usize },
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Mean { x: Var, axes: Vec<usize> },
    Sum(Var),
    MatMul(Box<MatMulCtx>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Softmax { x: Var, axis: usize },
    LayerNorm(Box<LayerNormCtx<S>>),
    CrossEntropy { logits: Var, label: usize },
}

#[derive(Debug)]
struct MatMulCtx {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    p: usize,
    // per output batch entry: matrix offsets into a and b
    a_off: Vec<usize>,
    b_off: Vec<usize>,
}

#[derive(Debug)]
struct LayerNormCtx<S> {
    x: Var,
    gamma: Var,
    beta: Var,
    axis: usize,
    xhat: Vec<S>,
    inv_std: Vec<S>,
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording of primitive applications with their forward values.
///
/// Single-threaded by construction: a tape is owned by one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient (data).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch("add", &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch("mul", &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v * c).collect(),
        };
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// `x + bias` with a rank-1 `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        check_axis("add_bias", axis, tx.rank())?;
        if tb.rank() != 1 || tb.shape[0] != tx.shape[axis] {
            return Err(mismatch("add_bias", &tx.shape, &tb.shape));
        }
        let (outer, n, inner) = axis_blocks(&tx.shape, axis);
        let mut data = tx.data.clone();
        for o in 0..outer {
            for c in 0..n {
                let base = (o * n + c) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += tb.data[c]);
            }
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::AddBias { x, bias, axis }, &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.max(S::zero())).collect(),
        };
        self.push(value, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| kernels::gelu(v)).collect(),
        };
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Materializing axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", &t.shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
        let src = permute_sources(&t.shape, perm);
        let data = src.iter().map(|&s| t.data[s]).collect();
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.value(*first).shape.clone();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = &self.value(p).shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Contiguous range `[start, start+len)` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("slice", axis, t.rank())?;
        if len == 0 || start + len > t.shape[axis] {
            return Err(Error::OutOfRange {
                what: "slice",
                index: start + len,
                limit: t.shape[axis],
            });
        }
        let (outer, n, inner) = axis_blocks(&t.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data[base..base + len * inner]);
        }
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits `axis` into `parts` equal pieces.
    pub fn split(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let shape = self.value(x).shape.clone();
        check_axis("split", axis, shape.len())?;
        if parts == 0 || shape[axis] % parts != 0 {
            return Err(Error::Indivisible {
                op: "split",
                extent: shape[axis],
                divisor: parts,
            });
        }
        let len = shape[axis] / parts;
        (0..parts).map(|i| self.slice(x, axis, i * len, len)).collect()
    }

    /// Mean over `axes`; reduced axes are removed from the output shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        for &a in axes {
            check_axis("mean", a, rank)?;
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let (out_shape, map) = reduce_map(&t.shape, &axes);
        let count: usize = axes.iter().map(|&a| t.shape[a]).product();
        let inv = S::one() / S::from_f64(count as f64);
        let mut data = vec![S::zero(); out_shape.iter().product()];
        for (i, &o) in map.iter().enumerate() {
            data[o] += t.data[i];
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(value, Op::Mean { x, axes }, &[x]))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Batched `[.., M, K] × [.., K, P]`; leading extents must match or be 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || tb.rank() < 2 {
            return Err(mismatch("matmul", &ta.shape, &tb.shape));
        }
        let (ra, rb) = (ta.rank(), tb.rank());
        let (m, k) = (ta.shape[ra - 2], ta.shape[ra - 1]);
        let (k2, p) = (tb.shape[rb - 2], tb.shape[rb - 1]);
        if k != k2 {
            return Err(mismatch("matmul", &ta.shape, &tb.shape));
        }
        let (batch, a_off, b_off) = broadcast_batch(&ta.shape[..ra - 2], &tb.shape[..rb - 2])
            .ok_or_else(|| mismatch("matmul", &ta.shape, &tb.shape))?;
        let mut data = vec![S::zero(); a_off.len() * m * p];
        for (bi, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
            kernels::matmul_acc(
                &ta.data[ao * m * k..(ao + 1) * m * k],
                &tb.data[bo * k * p..(bo + 1) * k * p],
                &mut data[bi * m * p..(bi + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let mut shape = batch;
        shape.extend([m, p]);
        let value = Tensor { shape, data };
        let ctx = MatMulCtx {
            a,
            b,
            m,
            k,
            p,
            a_off,
            b_off,
        };
        Ok(self.push(value, Op::MatMul(Box::new(ctx)), &[a, b]))
    }

    /// 2-D convolution with zero padding. `x: [N,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 || tx.shape[1] != tw.shape[1] {
            return Err(mismatch("conv2d", &tx.shape, &tw.shape));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be >= 1".into()));
        }
        let (n, cin, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (cout, kh, kw) = (tw.shape[0], tw.shape[2], tw.shape[3]);
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::KernelTooLarge {
                kernel: (kh, kw),
                padded: (ph, pw),
            });
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape != [cout] {
                return Err(mismatch("conv2d bias", &tw.shape, &tb.shape));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let mut data = vec![S::zero(); n * cout * geom.oh * geom.ow];
        kernels::conv2d_forward(
            &geom,
            &tx.data,
            &tw.data,
            b.map(|b| self.value(b).data.as_slice()),
            &mut data,
        );
        let value = Tensor {
            shape: vec![n, cout, geom.oh, geom.ow],
            data,
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", axis, t.rank())?;
        let (outer, n, inner) = axis_blocks(&t.shape, axis);
        let mut data = t.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut max = S::neg_infinity();
                for j in 0..n {
                    max = max.max(data[idx(j)]);
                }
                let mut total = S::zero();
                for j in 0..n {
                    let e = (data[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    data[idx(j)] /= total;
                }
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Standardizes along `axis` (biased variance), then applies `gamma`/`beta` per position on that axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: S) -> Result<Var> {
        let t = self.value(x);
        check_axis("layer_norm", axis, t.rank())?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let n_axis = t.shape[axis];
        if tg.shape != [n_axis] || tb.shape != [n_axis] {
            return Err(mismatch("layer_norm", &t.shape, &tg.shape));
        }
        let (outer, n, inner) = axis_blocks(&t.shape, axis);
        let nf = S::from_f64(n as f64);
        let mut xhat = vec![S::zero(); t.numel()];
        let mut inv_std = vec![S::zero(); outer * inner];
        let mut data = vec![S::zero(); t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| t.data[idx(j)]).sum::<S>() / nf;
                let var = (0..n)
                    .map(|j| {
                        let d = t.data[idx(j)] - mean;
                        d * d
                    })
                    .sum::<S>()
                    / nf;
                let is = S::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..n {
                    let xh = (t.data[idx(j)] - mean) * is;
                    xhat[idx(j)] = xh;
                    data[idx(j)] = xh * tg.data[j] + tb.data[j];
                }
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let ctx = LayerNormCtx {
            x,
            gamma,
            beta,
            axis,
            xhat,
            inv_std,
        };
        Ok(self.push(value, Op::LayerNorm(Box::new(ctx)), &[x, gamma, beta]))
    }

    /// Negative log-likelihood of `label` under softmax(`logits`); `logits` holds one row of K scores.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        let k = t.numel();
        if label >= k {
            return Err(Error::OutOfRange {
                what: "cross_entropy label",
                index: label,
                limit: k,
            });
        }
        let max = t.data.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = t.data.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        let value = Tensor::scalar(lse - t.data[label]);
        Ok(self.push(value, Op::CrossEntropy { logits, label }, &[logits]))
    }

    /// Accumulates d`loss`/d`node` into every node reachable from `loss`.
    ///
    /// Repeated calls add to the stored gradients; call [`Tape::zero_grad`] in between to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape.clone();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if self.grads.len() < self.nodes.len() {
                self.grads.resize(self.nodes.len(), None);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$d:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let mut buf = adj[v.0]
                        .take()
                        .unwrap_or_else(|| vec![S::zero(); nodes[v.0].value.numel()]);
                    {
                        let $d: &mut [S] = &mut buf;
                        $body
                    }
                    adj[v.0] = Some(buf);
                }
            }};
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |d| { d.iter_mut().zip(g).for_each(|(x, &y)| *x += y) });
                with_grad!(*b, |d| { d.iter_mut().zip(g).for_each(|(x, &y)| *x += y) });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                with_grad!(*a, |d| {
                    for ((x, &gy), &bv) in d.iter_mut().zip(g).zip(vb) {
                        *x += gy * bv;
                    }
                });
                with_grad!(*b, |d| {
                    for ((x, &gy), &av) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |d| { d.iter_mut().zip(g).for_each(|(v, &gy)| *v += gy * *c) });
            }
            Op::AddBias { x, bias, axis } => {
                with_grad!(*x, |d| { d.iter_mut().zip(g).for_each(|(v, &gy)| *v += gy) });
                let (outer, n, inner) = axis_blocks(&out.shape, *axis);
                with_grad!(*bias, |d| {
                    for o in 0..outer {
                        for c in 0..n {
                            let base = (o * n + c) * inner;
                            d[c] += g[base..base + inner].iter().copied().sum::<S>();
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value.data;
                with_grad!(*x, |d| {
                    for ((v, &gy), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > S::zero() {
                            *v += gy;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value.data;
                with_grad!(*x, |d| {
                    for ((v, &gy), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *v += gy * kernels::gelu_grad(xi);
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |d| { d.iter_mut().zip(g).for_each(|(v, &gy)| *v += gy) });
            }
            Op::Permute { x, perm } => {
                let src = permute_sources(&nodes[x.0].value.shape, perm);
                with_grad!(*x, |d| {
                    for (o, &s) in src.iter().enumerate() {
                        d[s] += g[o];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_blocks(&out.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape[*axis];
                    with_grad!(p, |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            d[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                                .for_each(|(v, &gy)| *v += gy);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let len = out.shape[*axis];
                let (outer, n, inner) = axis_blocks(&nodes[x.0].value.shape, *axis);
                with_grad!(*x, |d| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        d[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                            .for_each(|(v, &gy)| *v += gy);
                    }
                });
            }
            Op::Mean { x, axes } => {
                let in_shape = &nodes[x.0].value.shape;
                let (_, map) = reduce_map(in_shape, axes);
                let count: usize = axes.iter().map(|&a| in_shape[a]).product();
                let inv = S::one() / S::from_f64(count as f64);
                with_grad!(*x, |d| {
                    for (v, &o) in d.iter_mut().zip(&map) {
                        *v += g[o] * inv;
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |d| { d.iter_mut().for_each(|v| *v += g[0]) });
            }
            Op::MatMul(ctx) => {
                let MatMulCtx {
                    a,
                    b,
                    m,
                    k,
                    p,
                    a_off,
                    b_off,
                } = ctx.as_ref();
                let (m, k, p) = (*m, *k, *p);
                let (va, vb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                with_grad!(*a, |d| {
                    for (bi, (&ao, &bo)) in a_off.iter().zip(b_off).enumerate() {
                        kernels::matmul_acc_bt(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &vb[bo * k * p..(bo + 1) * k * p],
                            &mut d[ao * m * k..(ao + 1) * m * k],
                            m,
                            k,
                            p,
                        );
                    }
                });
                with_grad!(*b, |d| {
                    for (bi, (&ao, &bo)) in a_off.iter().zip(b_off).enumerate() {
                        kernels::matmul_acc_at(
                            &va[ao * m * k..(ao + 1) * m * k],
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut d[bo * k * p..(bo + 1) * k * p],
                            m,
                            k,
                            p,
                        );
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (&nodes[x.0].value.data, &nodes[w.0].value.data);
                with_grad!(*x, |d| {
                    kernels::conv2d_backward(geom, vx, vw, g, Some(d), None, None);
                });
                with_grad!(*w, |d| {
                    kernels::conv2d_backward(geom, vx, vw, g, None, Some(d), None);
                });
                if let Some(b) = b {
                    with_grad!(*b, |d| {
                        kernels::conv2d_backward(geom, vx, vw, g, None, None, Some(d));
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_blocks(&out.shape, *axis);
                let y = &out.data;
                with_grad!(*x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum::<S>();
                            for j in 0..n {
                                d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm(ctx) => {
                let LayerNormCtx {
                    x,
                    gamma,
                    beta,
                    axis,
                    xhat,
                    inv_std,
                } = ctx.as_ref();
                let (outer, n, inner) = axis_blocks(&out.shape, *axis);
                let gv = &nodes[gamma.0].value.data;
                with_grad!(*gamma, |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                let id = (o * n + j) * inner + i;
                                d[j] += g[id] * xhat[id];
                            }
                        }
                    }
                });
                with_grad!(*beta, |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            d[j] += g[base..base + inner].iter().copied().sum::<S>();
                        }
                    }
                });
                let nf = S::from_f64(n as f64);
                with_grad!(*x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let mut s1 = S::zero();
                            let mut s2 = S::zero();
                            for j in 0..n {
                                let dxh = g[idx(j)] * gv[j];
                                s1 += dxh;
                                s2 += dxh * xhat[idx(j)];
                            }
                            let is = inv_std[o * inner + i];
                            for j in 0..n {
                                let dxh = g[idx(j)] * gv[j];
                                d[idx(j)] += is / nf * (nf * dxh - s1 - xhat[idx(j)] * s2);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, label } => {
                let t = &nodes[logits.0].value.data;
                let max = t.iter().copied().fold(S::neg_infinity(), S::max);
                let total = t.iter().map(|&v| (v - max).exp()).sum::<S>();
                with_grad!(*logits, |d| {
                    for (j, (v, &l)) in d.iter_mut().zip(t).enumerate() {
                        let p = (l - max).exp() / total;
                        let y = if j == *label { S::one() } else { S::zero() };
                        *v += g[0] * (p - y);
                    }
                });
            }
        }
    }
}

/// For each output element of a permutation, the flat index of its source element.
fn permute_sources(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        out.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Output shape with `axes` removed, and the output flat index for every input element.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut contrib = vec![0usize; shape.len()];
    for (k, &a) in keep.iter().enumerate() {
        contrib[a] = out_strides[k];
    }
    let numel: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    let mut map = Vec::with_capacity(numel);
    for _ in 0..numel {
        map.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            o += contrib[d];
            if idx[d] < shape[d] {
                break;
            }
            o -= contrib[d] * shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

/// Broadcast leading batch extents; returns the output batch shape and per-entry matrix offsets.
fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || x == 1 || y == 1 {
            out.push(x.max(y));
        } else {
            return None;
        }
    }
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total: usize = out.iter().product();
    let mut a_off = Vec::with_capacity(total);
    let mut b_off = Vec::with_capacity(total);
    let out_strides = strides(&out);
    for flat in 0..total {
        let (mut ao, mut bo) = (0, 0);
        for d in 0..rank {
            let i = (flat / out_strides[d]) % out[d];
            if pa[d] != 1 {
                ao += i * sa[d];
            }
            if pb[d] != 1 {
                bo += i * sb[d];
            }
        }
        a_off.push(ao);
        b_off.push(bo);
    }
    Some((out, a_off, b_off))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{check_gradients, random_tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);

        let row = tape.constant(t(&[1, 2], &[1., 0.]));
        let col = tape.constant(t(&[2, 1], &[5., 7.]));
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(out).data(), &[5.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_leading_ones() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let b = tape.constant(t(&[1, 2, 2], &[1., 0., 0., 1.]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(out), &[3, 2, 2]);
        assert_eq!(tape.value(out), tape.value(a));
        let c = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(tape.matmul(a, c).is_err());
    }

    #[test]
    fn matmul_gradient() {
        let a = random_tensor(&[3, 4], 1, 1.0);
        let b = random_tensor(&[4, 2], 2, 1.0);
        let report = check_gradients(&[a, b], |tape, v| {
            let y = tape.matmul(v[0], v[1])?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        let doubled: Vec<f64> = (0..9).map(|i| 2.0 * i as f64).collect();
        assert_eq!(tape.value(y).data(), doubled.as_slice());

        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.; 4]);

        let big = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
        assert!(matches!(
            tape.conv2d(x, big, None, 1, 0),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[1000., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::full(&[3], 4.2));
        let y = tape.layer_norm(x, g, b, 0, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1., 3.]));
        let y = tape.layer_norm(x, g, b, 0, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn concat_and_split() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[1, 2], &[3., 4.]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);

        let x = tape.constant(random_tensor(&[2, 6, 3, 3], 5, 1.0));
        let parts = tape.split(x, 1, 3).unwrap();
        assert!(parts.iter().all(|&p| tape.shape(p) == [2, 2, 3, 3]));
        let back = tape.concat(&parts, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        assert!(matches!(tape.split(x, 1, 4), Err(Error::Indivisible { .. })));
        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.concat(&[a, bad], 0).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random_tensor(&[2, 3, 4, 5], 9, 1.0));
        let y = tape.permute(x, &[2, 0, 3, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 5, 3]);
        assert_eq!(tape.value(y).get(&[1, 0, 2, 2]), tape.value(x).get(&[0, 2, 1, 2]));
        let z = tape.permute(y, &[1, 3, 0, 2]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        assert!(tape.permute(x, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn mean_over_axes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let m = tape.mean(x, &[0]).unwrap();
        assert_eq!(tape.value(m).data(), &[1.5, 2.5, 3.5]);
        let m = tape.mean(x, &[1]).unwrap();
        assert_eq!(tape.value(m).data(), &[1., 4.]);
    }

    #[test]
    fn backward_basic_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.; 6]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 4.]);
        // accumulation without reset
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4., 8.]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        assert!(matches!(tape.backward(sq), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1., 2.]));
        let x = tape.leaf(t(&[2], &[3., 4.]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[2], &[0., 0.]));
        let l = tape.cross_entropy(z, 1).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let z = tape.leaf(t(&[2], &[20., -20.]));
        let l = tape.cross_entropy(z, 0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-8);
        assert!(tape.cross_entropy(z, 2).is_err());
    }
}
