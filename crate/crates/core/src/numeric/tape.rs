//! Reverse-mode differentiation over a linear record of primitive applications.
//!
//! Every primitive appends one node holding its output value. Nodes are only
//! ever appended after their inputs, so the index order is a topological order
//! and [`Tape::backward`] walks it in reverse exactly once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::real::{gemm, MatRef};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds with a registered adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    MatMul,
    ChannelMix,
    GraphAggregate,
    TemporalConv,
    BatchNorm,
    Relu,
    Softmax,
    Dropout,
    GlobalAvgPool,
    Affine,
    VertexSimilarity,
    ScalarFn,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::MatMul,
        OpKind::ChannelMix,
        OpKind::GraphAggregate,
        OpKind::TemporalConv,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::Dropout,
        OpKind::GlobalAvgPool,
        OpKind::Affine,
        OpKind::VertexSimilarity,
        OpKind::ScalarFn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::MatMul => "matmul",
            OpKind::ChannelMix => "channel_mix",
            OpKind::GraphAggregate => "graph_aggregate",
            OpKind::TemporalConv => "temporal_conv",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::Dropout => "dropout",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Affine => "affine",
            OpKind::VertexSimilarity => "vertex_similarity",
            OpKind::ScalarFn => "scalar_fn",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Which axes of an `N x C x T x V` input share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnAxes {
    /// One feature per channel; statistics over batch, time and vertex.
    Channel,
    /// One feature per (channel, vertex); statistics over batch and time.
    ChannelVertex,
}

impl BnAxes {
    pub fn feature_count(self, channels: usize, vertices: usize) -> usize {
        match self {
            BnAxes::Channel => channels,
            BnAxes::ChannelVertex => channels * vertices,
        }
    }
}

/// Per-feature batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased variance, the one used for normalization.
    pub var: Vec<F>,
    /// Number of elements reduced per feature.
    pub count: usize,
}

/// Normalization mode for [`Tape::batch_norm`].
pub enum BnMode<'a, F> {
    Train { eps: F },
    Eval { mean: &'a [F], var: &'a [F], eps: F },
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    MatMul(Var, Var),
    ChannelMix { x: Var, w: Var, b: Option<Var> },
    GraphAggregate { x: Var, adj: Var },
    TemporalConv { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, axes: BnAxes, xhat: Vec<F>, inv_std: Vec<F>, train: bool },
    Relu(Var),
    Softmax { x: Var, axis: usize },
    Dropout { x: Var, mask: Vec<F> },
    GlobalAvgPool(Var),
    Affine { x: Var, w: Var, b: Var },
    VertexSimilarity { theta: Var, phi: Var, scale: F },
    ScalarFn { x: Var, grad: Vec<F> },
}

impl<F> Op<F> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::MatMul(..) => OpKind::MatMul,
            Op::ChannelMix { .. } => OpKind::ChannelMix,
            Op::GraphAggregate { .. } => OpKind::GraphAggregate,
            Op::TemporalConv { .. } => OpKind::TemporalConv,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Affine { .. } => OpKind::Affine,
            Op::VertexSimilarity { .. } => OpKind::VertexSimilarity,
            Op::ScalarFn { .. } => OpKind::ScalarFn,
        })
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], one per `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to a leaf recorded with
    /// `requires_grad`. Leaves not on the loss path get zeros.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Record of primitive applications plus the seeded generator for dropout masks.
pub struct Tape<F: Real = f64> {
    nodes: Vec<Node<F>>,
    consumed: bool,
    rng: ChaCha8Rng,
    fault: Option<OpKind>,
}

fn check_finite<F: Real>(op: OpKind, t: &Tensor<F>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.name() })
    }
}

fn dims4<F: Real>(op: OpKind, t: &Tensor<F>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, tt, v] => Ok([n, c, tt, v]),
        ref s => Err(Error::shape(op.name(), format!("expected N x C x T x V, got {s:?}"))),
    }
}

impl<F: Real> Tape<F> {
    pub fn new(seed: u64) -> Self {
        Tape { nodes: Vec::new(), consumed: false, rng: ChaCha8Rng::seed_from_u64(seed), fault: None }
    }

    /// Test hook: every adjoint of `kind` is deliberately doubled.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Kinds of the recorded primitives, in recording order.
    pub fn recorded_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().filter_map(|n| n.op.kind()).collect()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, kind: OpKind, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        check_finite(kind, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: OpKind, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op.name(), format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.same_shape(kind, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(OpKind::Add, a, b, |x, y| x + y)?;
        self.push(OpKind::Add, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(OpKind::Sub, a, b, |x, y| x - y)?;
        self.push(OpKind::Sub, out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(OpKind::Mul, a, b, |x, y| x * y)?;
        self.push(OpKind::Mul, out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(OpKind::Scale, out, Op::Scale(x, s), &[x])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(OpKind::Sum, out, Op::Sum(x), &[x])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![F::zero(); m * n];
        gemm(F::one(), MatRef::new(ta.data(), m, k), MatRef::new(tb.data(), k, n), F::zero(), &mut out);
        let out = Tensor::new([m, n], out)?;
        self.push(OpKind::MatMul, out, Op::MatMul(a, b), &[a, b])
    }

    /// 1x1 convolution: `x [N, Ci, T, V]`, `w [Co, Ci]`, optional bias `[Co]`.
    pub fn channel_mix(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let kind = OpKind::ChannelMix;
        let [n, ci, t, v] = dims4(kind, self.value(x))?;
        let co = match *self.value(w).shape() {
            [co, ci2] if ci2 == ci => co,
            ref s => return Err(Error::shape(kind.name(), format!("weight {s:?} for {ci} input channels"))),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::shape(kind.name(), format!("bias {:?}, want [{co}]", self.value(b).shape())));
            }
        }
        let tv = t * v;
        let mut out = vec![F::zero(); n * co * tv];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            for s in 0..n {
                let xn = &xs[s * ci * tv..(s + 1) * ci * tv];
                let yn = &mut out[s * co * tv..(s + 1) * co * tv];
                gemm(F::one(), MatRef::new(ws, co, ci), MatRef::new(xn, ci, tv), F::zero(), yn);
                if let Some(b) = b {
                    let bs = self.value(b).data();
                    for (c, row) in yn.chunks_mut(tv).enumerate() {
                        row.iter_mut().for_each(|y| *y += bs[c]);
                    }
                }
            }
        }
        let out = Tensor::new([n, co, t, v], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(kind, out, Op::ChannelMix { x, w, b }, &inputs)
    }

    /// Graph aggregation `out[n,c,t,w] = sum_v adj[w,v] * x[n,c,t,v]`.
    ///
    /// `adj` is either a shared `[V, V]` matrix or per-sample `[N, V, V]`.
    pub fn graph_aggregate(&mut self, x: Var, adj: Var) -> Result<Var> {
        let kind = OpKind::GraphAggregate;
        let [n, c, t, v] = dims4(kind, self.value(x))?;
        let per_sample = match *self.value(adj).shape() {
            [a, b] if a == v && b == v => false,
            [m, a, b] if m == n && a == v && b == v => true,
            ref s => return Err(Error::shape(kind.name(), format!("adjacency {s:?} for input [{n}, {c}, {t}, {v}]"))),
        };
        let mut out = vec![F::zero(); n * c * t * v];
        {
            let xs = self.value(x).data();
            let a = self.value(adj).data();
            if per_sample {
                let rows = c * t;
                for s in 0..n {
                    let xn = &xs[s * rows * v..(s + 1) * rows * v];
                    let an = &a[s * v * v..(s + 1) * v * v];
                    gemm(
                        F::one(),
                        MatRef::new(xn, rows, v),
                        MatRef::new(an, v, v).t(),
                        F::zero(),
                        &mut out[s * rows * v..(s + 1) * rows * v],
                    );
                }
            } else {
                gemm(F::one(), MatRef::new(xs, n * c * t, v), MatRef::new(a, v, v).t(), F::zero(), &mut out);
            }
        }
        let out = Tensor::new([n, c, t, v], out)?;
        self.push(kind, out, Op::GraphAggregate { x, adj }, &[x, adj])
    }

    /// Temporal convolution with a `Kt x 1` kernel and zero same-padding.
    /// `x [N, Ci, T, V]`, `w [Co, Ci, Kt]` with odd `Kt`, optional bias `[Co]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let kind = OpKind::TemporalConv;
        let [n, ci, t, v] = dims4(kind, self.value(x))?;
        let (co, kt) = match *self.value(w).shape() {
            [co, ci2, kt] if ci2 == ci && kt % 2 == 1 => (co, kt),
            ref s => {
                return Err(Error::shape(kind.name(), format!("kernel {s:?} for {ci} input channels (odd Kt required)")))
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::shape(kind.name(), format!("bias {:?}, want [{co}]", self.value(b).shape())));
            }
        }
        let tv = t * v;
        let mut out = vec![F::zero(); n * co * tv];
        let mut col = vec![F::zero(); ci * kt * tv];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            for s in 0..n {
                im2col(&xs[s * ci * tv..(s + 1) * ci * tv], ci, t, v, kt, &mut col);
                let yn = &mut out[s * co * tv..(s + 1) * co * tv];
                gemm(F::one(), MatRef::new(ws, co, ci * kt), MatRef::new(&col, ci * kt, tv), F::zero(), yn);
                if let Some(b) = b {
                    let bs = self.value(b).data();
                    for (c, row) in yn.chunks_mut(tv).enumerate() {
                        row.iter_mut().for_each(|y| *y += bs[c]);
                    }
                }
            }
        }
        let out = Tensor::new([n, co, t, v], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(kind, out, Op::TemporalConv { x, w, b }, &inputs)
    }

    /// Batch normalization of an `N x C x T x V` input. In training mode the
    /// batch statistics are returned so the caller can update running values.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axes: BnAxes,
        mode: BnMode<'_, F>,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let kind = OpKind::BatchNorm;
        let [n, c, t, v] = dims4(kind, self.value(x))?;
        let nf = axes.feature_count(c, v);
        let want: Vec<usize> = match axes {
            BnAxes::Channel => vec![c],
            BnAxes::ChannelVertex => vec![c, v],
        };
        for p in [gamma, beta] {
            if self.value(p).shape() != want.as_slice() {
                return Err(Error::shape(kind.name(), format!("affine {:?}, want {want:?}", self.value(p).shape())));
            }
        }
        let xs = self.value(x).data();
        let count = xs.len() / nf;
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                let mut mean = vec![F::zero(); nf];
                let mut sq = vec![F::zero(); nf];
                bn_reduce([n, c, t, v], axes, &mut mean, |i, _| xs[i]);
                let inv_count = F::one() / F::from_usize(count).unwrap();
                mean.iter_mut().for_each(|m| *m *= inv_count);
                bn_reduce([n, c, t, v], axes, &mut sq, |i, f| {
                    let d = xs[i] - mean[f];
                    d * d
                });
                sq.iter_mut().for_each(|s| *s *= inv_count);
                (mean, sq, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != nf || var.len() != nf {
                    return Err(Error::shape(kind.name(), format!("running stats of length {} for {nf} features", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&s| F::one() / (s + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![F::zero(); xs.len()];
        let mut out = vec![F::zero(); xs.len()];
        for_each_bn(n, c, t, v, axes, |i, f| {
            let h = (xs[i] - mean[f]) * inv_std[f];
            xhat[i] = h;
            out[i] = g[f] * h + bt[f];
        });
        let out = Tensor::new([n, c, t, v], out)?;
        let stats = train.then(|| BatchStats { mean, var, count });
        let op = Op::BatchNorm { x, gamma, beta, axes, xhat, inv_std, train };
        let var_out = self.push(kind, out, op, &[x, gamma, beta])?;
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(OpKind::Relu, out, Op::Relu(x), &[x])
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let kind = OpKind::Softmax;
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(kind.name(), format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![F::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xs[idx(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..len {
                    let e = (xs[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(kind, out, Op::Softmax { x, axis }, &[x])
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`. With
    /// `train == false` (or `p == 0`) this is the identity and records nothing.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(x).len();
        // drop when a uniform 32-bit draw falls below p * 2^32
        let threshold = (p * 4_294_967_296.0) as u64;
        let mut draws = vec![0u32; n];
        self.rng.fill(draws.as_mut_slice());
        let mask: Vec<F> = draws.iter().map(|&u| if u64::from(u) < threshold { F::zero() } else { keep }).collect();
        let xt = self.value(x);
        let data = xt.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xt.shape(), data)?;
        self.push(OpKind::Dropout, out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over `T x V`: `[N, C, T, V] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let kind = OpKind::GlobalAvgPool;
        let [n, c, t, v] = dims4(kind, self.value(x))?;
        let tv = t * v;
        let inv = F::one() / F::from_usize(tv).unwrap();
        let data = self.value(x).data().chunks(tv).map(|ch| ch.iter().copied().sum::<F>() * inv).collect();
        let out = Tensor::new([n, c], data)?;
        self.push(kind, out, Op::GlobalAvgPool(x), &[x])
    }

    /// Fully connected map `x [N, D] -> x w^T + b`, `w [O, D]`, `b [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let kind = OpKind::Affine;
        let (n, d, o) = match (self.value(x).shape(), self.value(w).shape(), self.value(b).shape()) {
            (&[n, d], &[o, d2], &[o2]) if d == d2 && o == o2 => (n, d, o),
            (sx, sw, sb) => return Err(Error::shape(kind.name(), format!("x {sx:?}, w {sw:?}, b {sb:?}"))),
        };
        let mut out = vec![F::zero(); n * o];
        gemm(
            F::one(),
            MatRef::new(self.value(x).data(), n, d),
            MatRef::new(self.value(w).data(), o, d).t(),
            F::zero(),
            &mut out,
        );
        let bs = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bs).for_each(|(y, &bb)| *y += bb);
        }
        let out = Tensor::new([n, o], out)?;
        self.push(kind, out, Op::Affine { x, w, b }, &[x, w, b])
    }

    /// Vertex-by-vertex similarity of two embeddings:
    /// `S[n, v, w] = scale * sum_{c,t} theta[n,c,t,v] * phi[n,c,t,w]`.
    pub fn vertex_similarity(&mut self, theta: Var, phi: Var, scale: F) -> Result<Var> {
        let kind = OpKind::VertexSimilarity;
        self.same_shape(kind, theta, phi)?;
        let [n, c, t, v] = dims4(kind, self.value(theta))?;
        let rows = c * t;
        let mut out = vec![F::zero(); n * v * v];
        let (ts, ps) = (self.value(theta).data(), self.value(phi).data());
        for s in 0..n {
            gemm(
                scale,
                MatRef::new(&ts[s * rows * v..(s + 1) * rows * v], rows, v).t(),
                MatRef::new(&ps[s * rows * v..(s + 1) * rows * v], rows, v),
                F::zero(),
                &mut out[s * v * v..(s + 1) * v * v],
            );
        }
        let out = Tensor::new([n, v, v], out)?;
        self.push(kind, out, Op::VertexSimilarity { theta, phi, scale }, &[theta, phi])
    }

    /// Scalar function of `x` whose value and gradient were computed
    /// outside the tape (e.g. a risk estimator over a batch of scores).
    pub fn scalar_fn(&mut self, x: Var, value: F, grad: Tensor<F>) -> Result<Var> {
        let kind = OpKind::ScalarFn;
        if grad.shape() != self.value(x).shape() {
            return Err(Error::shape(kind.name(), format!("gradient {:?} for input {:?}", grad.shape(), self.value(x).shape())));
        }
        check_finite(kind, &grad)?;
        let out = Tensor::scalar(value);
        self.push(kind, out, Op::ScalarFn { x, grad: grad.into_data() }, &[x])
    }

    /// Propagates adjoints from the scalar `loss` back to every leaf that
    /// requires a gradient. A tape can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lshape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(lshape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lshape));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.fault.is_some() && node.op.kind() == self.fault {
                g = g.map(|v| v + v);
            }
            self.adjoint(i, g, &mut grads)?;
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn adjoint(&self, i: usize, g: Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape(), d)?);
                }
                if rg(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), gd[0]));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(*a) {
                    let mut d = vec![F::zero(); m * k];
                    gemm(F::one(), MatRef::new(gd, m, n), MatRef::new(tb.data(), k, n).t(), F::zero(), &mut d);
                    self.accumulate(grads, *a, Tensor::new([m, k], d)?);
                }
                if rg(*b) {
                    let mut d = vec![F::zero(); k * n];
                    gemm(F::one(), MatRef::new(ta.data(), m, k).t(), MatRef::new(gd, m, n), F::zero(), &mut d);
                    self.accumulate(grads, *b, Tensor::new([k, n], d)?);
                }
            }
            Op::ChannelMix { x, w, b } => {
                let tx = val(*x);
                let (n, ci, tv) = (tx.shape()[0], tx.shape()[1], tx.shape()[2] * tx.shape()[3]);
                let co = val(*w).shape()[0];
                let ws = val(*w).data();
                if rg(*x) {
                    let mut d = vec![F::zero(); tx.len()];
                    for s in 0..n {
                        gemm(
                            F::one(),
                            MatRef::new(ws, co, ci).t(),
                            MatRef::new(&gd[s * co * tv..(s + 1) * co * tv], co, tv),
                            F::zero(),
                            &mut d[s * ci * tv..(s + 1) * ci * tv],
                        );
                    }
                    self.accumulate(grads, *x, Tensor::new(tx.shape(), d)?);
                }
                if rg(*w) {
                    let mut d = vec![F::zero(); co * ci];
                    for s in 0..n {
                        gemm(
                            F::one(),
                            MatRef::new(&gd[s * co * tv..(s + 1) * co * tv], co, tv),
                            MatRef::new(&tx.data()[s * ci * tv..(s + 1) * ci * tv], ci, tv).t(),
                            F::one(),
                            &mut d,
                        );
                    }
                    self.accumulate(grads, *w, Tensor::new([co, ci], d)?);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(gd, n, co, tv));
                }
            }
            Op::GraphAggregate { x, adj } => {
                let tx = val(*x);
                let ta = val(*adj);
                let [n, c, t, v] = dims4(OpKind::GraphAggregate, tx)?;
                let per_sample = ta.ndim() == 3;
                if rg(*x) {
                    let mut d = vec![F::zero(); tx.len()];
                    if per_sample {
                        let rows = c * t;
                        for s in 0..n {
                            gemm(
                                F::one(),
                                MatRef::new(&gd[s * rows * v..(s + 1) * rows * v], rows, v),
                                MatRef::new(&ta.data()[s * v * v..(s + 1) * v * v], v, v),
                                F::zero(),
                                &mut d[s * rows * v..(s + 1) * rows * v],
                            );
                        }
                    } else {
                        gemm(F::one(), MatRef::new(gd, n * c * t, v), MatRef::new(ta.data(), v, v), F::zero(), &mut d);
                    }
                    self.accumulate(grads, *x, Tensor::new(tx.shape(), d)?);
                }
                if rg(*adj) {
                    let mut d = vec![F::zero(); ta.len()];
                    if per_sample {
                        let rows = c * t;
                        for s in 0..n {
                            gemm(
                                F::one(),
                                MatRef::new(&gd[s * rows * v..(s + 1) * rows * v], rows, v).t(),
                                MatRef::new(&tx.data()[s * rows * v..(s + 1) * rows * v], rows, v),
                                F::zero(),
                                &mut d[s * v * v..(s + 1) * v * v],
                            );
                        }
                    } else {
                        gemm(
                            F::one(),
                            MatRef::new(gd, n * c * t, v).t(),
                            MatRef::new(tx.data(), n * c * t, v),
                            F::zero(),
                            &mut d,
                        );
                    }
                    self.accumulate(grads, *adj, Tensor::new(ta.shape(), d)?);
                }
            }
            Op::TemporalConv { x, w, b } => {
                let tx = val(*x);
                let [n, ci, t, v] = dims4(OpKind::TemporalConv, tx)?;
                let (co, kt) = (val(*w).shape()[0], val(*w).shape()[2]);
                let tv = t * v;
                let ws = val(*w).data();
                let mut col = vec![F::zero(); ci * kt * tv];
                let mut dx = rg(*x).then(|| vec![F::zero(); tx.len()]);
                let mut dw = rg(*w).then(|| vec![F::zero(); co * ci * kt]);
                for s in 0..n {
                    let gn = &gd[s * co * tv..(s + 1) * co * tv];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&tx.data()[s * ci * tv..(s + 1) * ci * tv], ci, t, v, kt, &mut col);
                        gemm(F::one(), MatRef::new(gn, co, tv), MatRef::new(&col, ci * kt, tv).t(), F::one(), dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(F::one(), MatRef::new(ws, co, ci * kt).t(), MatRef::new(gn, co, tv), F::zero(), &mut col);
                        col2im_add(&col, ci, t, v, kt, &mut dx[s * ci * tv..(s + 1) * ci * tv]);
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(tx.shape(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new([co, ci, kt], dw)?);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(gd, n, co, tv));
                }
            }
            Op::BatchNorm { x, gamma, beta, axes, xhat, inv_std, train } => {
                let [n, c, t, v] = dims4(OpKind::BatchNorm, val(*x))?;
                let nf = inv_std.len();
                let mut sum_g = vec![F::zero(); nf];
                let mut sum_gx = vec![F::zero(); nf];
                bn_reduce([n, c, t, v], *axes, &mut sum_g, |i, _| gd[i]);
                bn_reduce([n, c, t, v], *axes, &mut sum_gx, |i, _| gd[i] * xhat[i]);
                let gam = val(*gamma).data();
                if rg(*x) {
                    let mut d = vec![F::zero(); gd.len()];
                    if *train {
                        let m = F::from_usize(gd.len() / nf).unwrap();
                        for_each_bn(n, c, t, v, *axes, |i, f| {
                            d[i] = gam[f] * inv_std[f] / m * (m * gd[i] - sum_g[f] - xhat[i] * sum_gx[f]);
                        });
                    } else {
                        for_each_bn(n, c, t, v, *axes, |i, f| d[i] = gd[i] * gam[f] * inv_std[f]);
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
                }
                let pshape = val(*gamma).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(pshape.clone(), sum_gx)?);
                self.accumulate(grads, *beta, Tensor::new(pshape, sum_g)?);
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gg, &y)| if y > F::zero() { gg } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: F = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::GlobalAvgPool(x) => {
                let tx = val(*x);
                let tv = tx.shape()[2] * tx.shape()[3];
                let inv = F::one() / F::from_usize(tv).unwrap();
                let mut d = Vec::with_capacity(tx.len());
                for &gg in gd {
                    d.extend(std::iter::repeat(gg * inv).take(tv));
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape(), d)?);
            }
            Op::Affine { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, d_in, o) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                if rg(*x) {
                    let mut d = vec![F::zero(); n * d_in];
                    gemm(F::one(), MatRef::new(gd, n, o), MatRef::new(tw.data(), o, d_in), F::zero(), &mut d);
                    self.accumulate(grads, *x, Tensor::new([n, d_in], d)?);
                }
                if rg(*w) {
                    let mut d = vec![F::zero(); o * d_in];
                    gemm(F::one(), MatRef::new(gd, n, o).t(), MatRef::new(tx.data(), n, d_in), F::zero(), &mut d);
                    self.accumulate(grads, *w, Tensor::new([o, d_in], d)?);
                }
                if rg(*b) {
                    let mut d = vec![F::zero(); o];
                    for row in gd.chunks(o) {
                        d.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    self.accumulate(grads, *b, Tensor::new([o], d)?);
                }
            }
            Op::VertexSimilarity { theta, phi, scale } => {
                let (tt, tp) = (val(*theta), val(*phi));
                let [n, c, t, v] = dims4(OpKind::VertexSimilarity, tt)?;
                let rows = c * t;
                let blk = rows * v;
                if rg(*theta) {
                    let mut d = vec![F::zero(); tt.len()];
                    for s in 0..n {
                        gemm(
                            *scale,
                            MatRef::new(&tp.data()[s * blk..(s + 1) * blk], rows, v),
                            MatRef::new(&gd[s * v * v..(s + 1) * v * v], v, v).t(),
                            F::zero(),
                            &mut d[s * blk..(s + 1) * blk],
                        );
                    }
                    self.accumulate(grads, *theta, Tensor::new(tt.shape(), d)?);
                }
                if rg(*phi) {
                    let mut d = vec![F::zero(); tp.len()];
                    for s in 0..n {
                        gemm(
                            *scale,
                            MatRef::new(&tt.data()[s * blk..(s + 1) * blk], rows, v),
                            MatRef::new(&gd[s * v * v..(s + 1) * v * v], v, v),
                            F::zero(),
                            &mut d[s * blk..(s + 1) * blk],
                        );
                    }
                    self.accumulate(grads, *phi, Tensor::new(tp.shape(), d)?);
                }
            }
            Op::ScalarFn { x, grad } => {
                let s = gd[0];
                let d = grad.iter().map(|&v| v * s).collect();
                self.accumulate(grads, *x, Tensor::new(val(*x).shape(), d)?);
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Calls `f(flat_index, feature)` over an `N x C x T x V` layout.
#[inline]
/// `out[f] += sum of term(i, f)` over the entries `i` of feature `f`.
/// Partial sums run in eight independent lanes so the additions pipeline.
fn bn_reduce<F: Real>(dims: [usize; 4], axes: BnAxes, out: &mut [F], term: impl Fn(usize, usize) -> F) {
    let [n, c, t, v] = dims;
    match axes {
        BnAxes::Channel => {
            let tv = t * v;
            for s in 0..n {
                for ch in 0..c {
                    let start = (s * c + ch) * tv;
                    let mut lanes = [F::zero(); 8];
                    let mut j = start;
                    while j + 8 <= start + tv {
                        for (l, lane) in lanes.iter_mut().enumerate() {
                            *lane += term(j + l, ch);
                        }
                        j += 8;
                    }
                    let tail: F = (j..start + tv).map(|i| term(i, ch)).sum();
                    out[ch] += lanes.iter().copied().sum::<F>() + tail;
                }
            }
        }
        // features are already laid out contiguously along each vertex row
        BnAxes::ChannelVertex => for_each_bn(n, c, t, v, axes, |i, f| out[f] += term(i, f)),
    }
}

fn for_each_bn(n: usize, c: usize, t: usize, v: usize, axes: BnAxes, f: impl FnMut(usize, usize)) {
    match axes {
        BnAxes::Channel => walk_bn::<false>(n, c, t, v, f),
        BnAxes::ChannelVertex => walk_bn::<true>(n, c, t, v, f),
    }
}

#[inline(always)]
fn walk_bn<const PER_VERTEX: bool>(n: usize, c: usize, t: usize, v: usize, mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for _ in 0..n {
        for ch in 0..c {
            if PER_VERTEX {
                for _ in 0..t {
                    for vv in 0..v {
                        f(i + vv, ch * v + vv);
                    }
                    i += v;
                }
            } else {
                for j in i..i + t * v {
                    f(j, ch);
                }
                i += t * v;
            }
        }
    }
}

fn channel_sums<F: Real>(g: &[F], n: usize, c: usize, tv: usize) -> Tensor<F> {
    let mut d = vec![F::zero(); c];
    for s in 0..n {
        for (ch, acc) in d.iter_mut().enumerate() {
            let off = (s * c + ch) * tv;
            *acc += g[off..off + tv].iter().copied().sum::<F>();
        }
    }
    Tensor::new([c], d).expect("channel count is positive")
}

/// Unfolds one sample `x [Ci, T, V]` into `col [(Ci * Kt), (T * V)]`.
fn im2col<F: Real>(x: &[F], ci: usize, t: usize, v: usize, kt: usize, col: &mut [F]) {
    let pad = kt / 2;
    let tv = t * v;
    for c in 0..ci {
        for k in 0..kt {
            let row = &mut col[(c * kt + k) * tv..(c * kt + k + 1) * tv];
            // output frame `to` reads input frame `to + k - pad`
            let lo = pad.saturating_sub(k);
            let hi = (t + pad).saturating_sub(k).min(t);
            row[..lo * v].fill(F::zero());
            if hi > lo {
                let src = (lo + k - pad) * v;
                row[lo * v..hi * v].copy_from_slice(&x[c * tv + src..c * tv + src + (hi - lo) * v]);
            }
            row[hi.max(lo) * v..].fill(F::zero());
        }
    }
}

fn col2im_add<F: Real>(col: &[F], ci: usize, t: usize, v: usize, kt: usize, dx: &mut [F]) {
    let pad = kt / 2;
    let tv = t * v;
    for c in 0..ci {
        for k in 0..kt {
            let row = &col[(c * kt + k) * tv..(c * kt + k + 1) * tv];
            let lo = pad.saturating_sub(k);
            let hi = (t + pad).saturating_sub(k).min(t);
            if hi > lo {
                let dst = c * tv + (lo + k - pad) * v;
                for (d, &r) in dx[dst..dst + (hi - lo) * v].iter_mut().zip(&row[lo * v..hi * v]) {
                    *d += r;
                }
            }
        }
    }
}

