//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation order,
//! so a single reverse sweep in [`Graph::backward`] visits every node after all
//! of its consumers.

use crate::elem::{gemm, Elem};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    /// 1x1, stride 1, no padding: the input already is its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqr(Var),
    SumAll(Var),
    MeanAll(Var),
    Transpose(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    MaxChannels { x: Var, argmax: Vec<u32> },
    MeanChannels(Var),
    Upsample { x: Var, fh: usize, fw: usize },
    ToRows(Var),
    FromRows(Var),
    Concat { a: Var, b: Var, dim: usize },
    Narrow { x: Var, dim: usize, start: usize },
    SoftmaxRows(Var),
    BceWithLogits { logits: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

/// Normalization mode of [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

pub const BN_EPS: f64 = 1e-5;

/// Logits are clamped to this magnitude inside the BCE loss.
pub const LOGIT_CLAMP: f64 = 50.0;

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_at_dim(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

fn c<T: Elem>(v: f64) -> T {
    T::from_f64(v)
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf node. Gradients are only tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, name: &str) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{name}: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y, "add");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y, "sub");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y, "mul");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Sqr(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean_all of empty tensor");
        let v = Tensor::scalar(t.sum() / c(t.len() as f64));
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2, "transpose expects a matrix");
        let v = transpose2(t);
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// `op(a) * op(b)` where `op` optionally transposes a stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul: inner dims {sa:?} x {sb:?}");
        let mut out = vec![T::zero(); m * n];
        gemm(ta, tb, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// 2D convolution, NCHW input, `(cout, cin, kh, kw)` weight, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(xs[1], ws[1], "conv2d: input channels {} vs weight {}", xs[1], ws[1]);
        assert!(stride >= 1);
        let (kh, kw) = (ws[2], ws[3]);
        assert!(xs[2] + 2 * pad >= kh && xs[3] + 2 * pad >= kw, "conv2d: kernel larger than input");
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - kh) / stride + 1,
            wo: (xs[3] + 2 * pad - kw) / stride + 1,
        };
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[geom.cout], "conv2d bias shape");
        }
        let (k, p) = (geom.k(), geom.p());
        let in_sz = geom.cin * geom.h * geom.w;
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); geom.n * k * p] };
        let mut out = vec![T::zero(); geom.n * geom.cout * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for n in 0..geom.n {
                let xn = &xv[n * in_sz..(n + 1) * in_sz];
                let on = &mut out[n * geom.cout * p..(n + 1) * geom.cout * p];
                if geom.is_pointwise() {
                    gemm(false, false, geom.cout, p, k, T::one(), wv, xn, T::zero(), on);
                } else {
                    let cn = &mut cols[n * k * p..(n + 1) * k * p];
                    im2col(xn, &geom, cn);
                    gemm(false, false, geom.cout, p, k, T::one(), wv, cn, T::zero(), on);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for n in 0..geom.n {
                    for co in 0..geom.cout {
                        let base = (n * geom.cout + co) * p;
                        for o in &mut out[base..base + p] {
                            *o = *o + bv[co];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let shape = vec![geom.n, geom.cout, geom.ho, geom.wo];
        self.push(Tensor::new(shape, out), Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Per-channel batch normalization of an NCHW tensor.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> (Var, Option<BnStats<T>>) {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "batch_norm expects NCHW");
        let (n, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        assert_eq!(self.shape(gamma), &[ch]);
        assert_eq!(self.shape(beta), &[ch]);
        let m = n * hw;
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); ch];
        let mut stats = None;
        let eps: T = c(BN_EPS);
        match mode {
            BnMode::Train => {
                let mut means = vec![T::zero(); ch];
                let mut vars = vec![T::zero(); ch];
                for cc in 0..ch {
                    let mut s = T::zero();
                    for b in 0..n {
                        let base = (b * ch + cc) * hw;
                        for &v in &xv[base..base + hw] {
                            s = s + v;
                        }
                    }
                    let mean = s / c(m as f64);
                    let mut sq = T::zero();
                    for b in 0..n {
                        let base = (b * ch + cc) * hw;
                        for &v in &xv[base..base + hw] {
                            sq = sq + (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / c(m as f64);
                    means[cc] = mean;
                    vars[cc] = if m > 1 { sq / c((m - 1) as f64) } else { var };
                    inv_std[cc] = T::one() / (var + eps).sqrt();
                }
                for b in 0..n {
                    for cc in 0..ch {
                        let base = (b * ch + cc) * hw;
                        for i in base..base + hw {
                            xhat[i] = (xv[i] - means[cc]) * inv_std[cc];
                        }
                    }
                }
                stats = Some(BnStats { mean: means, var: vars });
            }
            BnMode::Eval { mean, var } => {
                assert!(mean.len() == ch && var.len() == ch, "batch_norm running stats length");
                for cc in 0..ch {
                    inv_std[cc] = T::one() / (var[cc] + eps).sqrt();
                }
                for b in 0..n {
                    for cc in 0..ch {
                        let base = (b * ch + cc) * hw;
                        for i in base..base + hw {
                            xhat[i] = (xv[i] - mean[cc]) * inv_std[cc];
                        }
                    }
                }
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for cc in 0..ch {
                let base = (b * ch + cc) * hw;
                for i in base..base + hw {
                    out[i] = gv[cc] * xhat[i] + bv[cc];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = matches!(mode, BnMode::Train);
        let var = self.push(
            Tensor::new(xs, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            rg,
        );
        (var, stats)
    }

    /// Maximum over the channel axis of an NCHW tensor, keeping a unit channel axis.
    pub fn max_channels(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "max_channels expects NCHW");
        let (n, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        assert!(ch >= 1);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        let mut argmax = vec![0u32; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut best = xv[b * ch * hw + p];
                let mut arg = 0;
                for cc in 1..ch {
                    let v = xv[(b * ch + cc) * hw + p];
                    if v > best {
                        best = v;
                        arg = cc;
                    }
                }
                out[b * hw + p] = best;
                argmax[b * hw + p] = arg as u32;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, 1, xs[2], xs[3]], out), Op::MaxChannels { x, argmax }, rg)
    }

    /// Mean over the channel axis of an NCHW tensor, keeping a unit channel axis.
    pub fn mean_channels(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "mean_channels expects NCHW");
        let (n, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        let inv: T = c(1.0 / ch as f64);
        for b in 0..n {
            for cc in 0..ch {
                let base = (b * ch + cc) * hw;
                for p in 0..hw {
                    out[b * hw + p] = out[b * hw + p] + xv[base + p];
                }
            }
            for o in &mut out[b * hw..(b + 1) * hw] {
                *o = *o * inv;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, 1, xs[2], xs[3]], out), Op::MeanChannels(x), rg)
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample_nearest(&mut self, x: Var, fh: usize, fw: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "upsample expects NCHW");
        assert!(fh >= 1 && fw >= 1);
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * fh, w * fw);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for pl in 0..planes {
            for oy in 0..oh {
                let src = &xv[pl * h * w + (oy / fh) * w..pl * h * w + (oy / fh + 1) * w];
                let dst = &mut out[pl * oh * ow + oy * ow..pl * oh * ow + (oy + 1) * ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / fw];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![xs[0], xs[1], oh, ow], out), Op::Upsample { x, fh, fw }, rg)
    }

    /// `(N, C, H, W) -> (N*H*W, C)`: one row per spatial position.
    pub fn to_rows(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "to_rows expects NCHW");
        let v = nchw_to_rows(self.value(x).data(), xs[0], xs[1], xs[2] * xs[3]);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![xs[0] * xs[2] * xs[3], xs[1]], v), Op::ToRows(x), rg)
    }

    /// Inverse of [`Graph::to_rows`].
    pub fn from_rows(&mut self, x: Var, n: usize, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[0], n * h * w, "from_rows: row count mismatch");
        let v = rows_to_nchw(self.value(x).data(), n, xs[1], h * w);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, xs[1], h, w], v), Op::FromRows(x), rg)
    }

    pub fn concat(&mut self, a: Var, b: Var, dim: usize) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), sb.len(), "concat: rank mismatch");
        for (i, (x, y)) in sa.iter().zip(&sb).enumerate() {
            assert!(i == dim || x == y, "concat: shape mismatch {sa:?} vs {sb:?} on dim {dim}");
        }
        let (outer, da, inner) = split_at_dim(&sa, dim);
        let db = sb[dim];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            out.extend_from_slice(&va[o * da * inner..(o + 1) * da * inner]);
            out.extend_from_slice(&vb[o * db * inner..(o + 1) * db * inner]);
        }
        let mut shape = sa.clone();
        shape[dim] = da + db;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out), Op::Concat { a, b, dim }, rg)
    }

    /// Slice `len` entries starting at `start` along `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (outer, d, inner) = split_at_dim(&xs, dim);
        assert!(start + len <= d, "narrow out of range: {start}+{len} > {d}");
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs.clone();
        shape[dim] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::Narrow { x, dim, start }, rg)
    }

    /// Softmax over the last axis, computed with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().expect("softmax of scalar");
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (row, orow) in xv.chunks(cols).zip(out.chunks_mut(cols)) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                s = s + *o;
            }
            for o in orow.iter_mut() {
                *o = *o / s;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(xs, out), Op::SoftmaxRows(x), rg)
    }

    /// Mean binary cross-entropy between `logits` and fixed 0/1 `targets`.
    ///
    /// Logits are clamped to `±LOGIT_CLAMP`; the clamp passes gradients through.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "bce: shape mismatch");
        assert!(!lv.is_empty());
        let lim: T = c(LOGIT_CLAMP);
        let mut s = T::zero();
        for (&x, &t) in lv.data().iter().zip(targets.data()) {
            let x = x.max(-lim).min(lim);
            s = s + x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        let v = Tensor::scalar(s / c(lv.len() as f64));
        let rg = self.rg(logits);
        self.push(v, Op::BceWithLogits { logits, targets: targets.data().to_vec() }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let shaped = |data: Vec<T>, like: Var| Tensor::new(self.shape(like).to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let d = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, shaped(d, *a));
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let d = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, shaped(d, *b));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * *s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ov = node.value.data();
                let d = gd.iter().zip(ov).map(|(&x, &y)| if y > T::zero() { x } else { T::zero() }).collect();
                self.acc(grads, *a, shaped(d, *a));
            }
            Op::Sigmoid(a) => {
                let ov = node.value.data();
                let d = gd.iter().zip(ov).map(|(&x, &y)| x * y * (T::one() - y)).collect();
                self.acc(grads, *a, shaped(d, *a));
            }
            Op::Sqr(a) => {
                let av = self.value(*a).data();
                let two: T = c(2.0);
                let d = gd.iter().zip(av).map(|(&x, &y)| two * x * y).collect();
                self.acc(grads, *a, shaped(d, *a));
            }
            Op::SumAll(a) => {
                self.acc(grads, *a, Tensor::full(self.shape(*a).to_vec(), g.item()));
            }
            Op::MeanAll(a) => {
                let n: T = c(self.value(*a).len() as f64);
                self.acc(grads, *a, Tensor::full(self.shape(*a).to_vec(), g.item() / n));
            }
            Op::Transpose(a) => self.acc(grads, *a, transpose2(g)),
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if tb { sb[0] } else { sb[1] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut d = vec![T::zero(); m * k];
                    if ta {
                        gemm(tb, true, k, m, n, T::one(), bv, gd, T::zero(), &mut d);
                    } else {
                        gemm(false, !tb, m, k, n, T::one(), gd, bv, T::zero(), &mut d);
                    }
                    self.acc(grads, *a, shaped(d, *a));
                }
                if self.rg(*b) {
                    let mut d = vec![T::zero(); k * n];
                    if tb {
                        gemm(true, ta, n, k, m, T::one(), gd, av, T::zero(), &mut d);
                    } else {
                        gemm(!ta, false, k, n, m, T::one(), av, gd, T::zero(), &mut d);
                    }
                    self.acc(grads, *b, shaped(d, *b));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (k, p) = (geom.k(), geom.p());
                let in_sz = geom.cin * geom.h * geom.w;
                let out_sz = geom.cout * p;
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut d = vec![T::zero(); geom.cout];
                        for n in 0..geom.n {
                            for (co, dv) in d.iter_mut().enumerate() {
                                let base = n * out_sz + co * p;
                                *dv = gd[base..base + p].iter().fold(*dv, |acc, &v| acc + v);
                            }
                        }
                        self.acc(grads, *b, shaped(d, *b));
                    }
                }
                let xv = self.value(*x).data();
                if self.rg(*w) {
                    let mut d = vec![T::zero(); geom.cout * k];
                    for n in 0..geom.n {
                        let gn = &gd[n * out_sz..(n + 1) * out_sz];
                        let colsn = if geom.is_pointwise() {
                            &xv[n * in_sz..(n + 1) * in_sz]
                        } else {
                            &cols[n * k * p..(n + 1) * k * p]
                        };
                        gemm(false, true, geom.cout, k, p, T::one(), gn, colsn, T::one(), &mut d);
                    }
                    self.acc(grads, *w, shaped(d, *w));
                }
                if self.rg(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = vec![T::zero(); geom.n * in_sz];
                    let mut dcols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
                    for n in 0..geom.n {
                        let gn = &gd[n * out_sz..(n + 1) * out_sz];
                        let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
                        if geom.is_pointwise() {
                            gemm(true, false, k, p, geom.cout, T::one(), wv, gn, T::zero(), dxn);
                        } else {
                            gemm(true, false, k, p, geom.cout, T::one(), wv, gn, T::zero(), &mut dcols);
                            col2im(&dcols, geom, dxn);
                        }
                    }
                    self.acc(grads, *x, shaped(dx, *x));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*x);
                let (n, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for b in 0..n {
                    for cc in 0..ch {
                        let base = (b * ch + cc) * hw;
                        for i in base..base + hw {
                            dgamma[cc] = dgamma[cc] + gd[i] * xhat[i];
                            dbeta[cc] = dbeta[cc] + gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let m: T = c((n * hw) as f64);
                    for cc in 0..ch {
                        // dxhat = g * gamma; sums of dxhat and dxhat*xhat are gamma*dbeta, gamma*dgamma
                        let s1 = gv[cc] * dbeta[cc];
                        let s2 = gv[cc] * dgamma[cc];
                        for b in 0..n {
                            let base = (b * ch + cc) * hw;
                            for i in base..base + hw {
                                let dxh = gd[i] * gv[cc];
                                dx[i] = if *train {
                                    inv_std[cc] / m * (m * dxh - s1 - xhat[i] * s2)
                                } else {
                                    dxh * inv_std[cc]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, shaped(dx, *x));
                }
                self.acc(grads, *gamma, Tensor::new(vec![ch], dgamma));
                self.acc(grads, *beta, Tensor::new(vec![ch], dbeta));
            }
            Op::MaxChannels { x, argmax } => {
                let xs = self.shape(*x);
                let (n, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = vec![T::zero(); n * ch * hw];
                for b in 0..n {
                    for p in 0..hw {
                        let cc = argmax[b * hw + p] as usize;
                        dx[(b * ch + cc) * hw + p] = gd[b * hw + p];
                    }
                }
                self.acc(grads, *x, shaped(dx, *x));
            }
            Op::MeanChannels(x) => {
                let xs = self.shape(*x);
                let (n, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let inv: T = c(1.0 / ch as f64);
                let mut dx = vec![T::zero(); n * ch * hw];
                for b in 0..n {
                    for cc in 0..ch {
                        for p in 0..hw {
                            dx[(b * ch + cc) * hw + p] = gd[b * hw + p] * inv;
                        }
                    }
                }
                self.acc(grads, *x, shaped(dx, *x));
            }
            Op::Upsample { x, fh, fw } => {
                let xs = self.shape(*x);
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (oh, ow) = (h * fh, w * fw);
                let mut dx = vec![T::zero(); planes * h * w];
                for pl in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let di = pl * h * w + (oy / fh) * w + ox / fw;
                            dx[di] = dx[di] + gd[pl * oh * ow + oy * ow + ox];
                        }
                    }
                }
                self.acc(grads, *x, shaped(dx, *x));
            }
            Op::ToRows(x) => {
                let xs = self.shape(*x);
                let d = rows_to_nchw(gd, xs[0], xs[1], xs[2] * xs[3]);
                self.acc(grads, *x, shaped(d, *x));
            }
            Op::FromRows(x) => {
                let os = node.value.shape();
                let d = nchw_to_rows(gd, os[0], os[1], os[2] * os[3]);
                self.acc(grads, *x, shaped(d, *x));
            }
            Op::Concat { a, b, dim } => {
                let sa = self.shape(*a);
                let (outer, da, inner) = split_at_dim(sa, *dim);
                let db = self.shape(*b)[*dim];
                let mut ga = Vec::with_capacity(outer * da * inner);
                let mut gb = Vec::with_capacity(outer * db * inner);
                for o in 0..outer {
                    let base = o * (da + db) * inner;
                    ga.extend_from_slice(&gd[base..base + da * inner]);
                    gb.extend_from_slice(&gd[base + da * inner..base + (da + db) * inner]);
                }
                self.acc(grads, *a, shaped(ga, *a));
                self.acc(grads, *b, shaped(gb, *b));
            }
            Op::Narrow { x, dim, start } => {
                let xs = self.shape(*x);
                let (outer, d, inner) = split_at_dim(xs, *dim);
                let len = node.value.shape()[*dim];
                let mut dx = vec![T::zero(); outer * d * inner];
                for o in 0..outer {
                    let base = (o * d + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, shaped(dx, *x));
            }
            Op::SoftmaxRows(x) => {
                let yv = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); yv.len()];
                for ((yr, gr), dr) in yv.chunks(cols).zip(gd.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
                    for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                self.acc(grads, *x, shaped(dx, *x));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let scale = g.item() / c(lv.len() as f64);
                let d = lv
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (T::one() / (T::one() + (-x).exp()) - t) * scale)
                    .collect();
                self.acc(grads, *logits, shaped(d, *logits));
            }
        }
    }
}

fn transpose2<T: Elem>(t: &Tensor<T>) -> Tensor<T> {
    let (r, cc) = (t.dim(0), t.dim(1));
    let v = t.data();
    let mut out = vec![T::zero(); r * cc];
    for i in 0..r {
        for j in 0..cc {
            out[j * r + i] = v[i * cc + j];
        }
    }
    Tensor::new(vec![cc, r], out)
}

fn nchw_to_rows<T: Elem>(x: &[T], n: usize, ch: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for cc in 0..ch {
            for p in 0..hw {
                out[(b * hw + p) * ch + cc] = x[(b * ch + cc) * hw + p];
            }
        }
    }
    out
}

fn rows_to_nchw<T: Elem>(x: &[T], n: usize, ch: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for cc in 0..ch {
            for p in 0..hw {
                out[(b * ch + cc) * hw + p] = x[(b * hw + p) * ch + cc];
            }
        }
    }
    out
}

fn im2col<T: Elem>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Elem>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
