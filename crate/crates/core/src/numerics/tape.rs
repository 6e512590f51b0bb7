//! Reverse-mode automatic differentiation over a linear record of operations.
//!
//! A [`Tape`] owns every intermediate value of one computation. [`Var`] is a
//! cheap copyable handle into it. Ops append nodes; [`Tape::backward`] walks
//! the record once in reverse. Since a node can only reference nodes created
//! before it, the record is acyclic by construction.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{
    self, axpy, check_finite, dot, inv_rms, matmul_into, matmul_nt_into, matmul_tn_into,
    mismatch, sigmoid, softmax_in_place,
};
use super::{NumericsError, Real, Tensor};

type Result<X> = std::result::Result<X, NumericsError>;

/// Geometry of one fused attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttnDims {
    /// Absolute position of the first query row; keys before it come from a cache.
    pub fn offset(&self) -> usize {
        self.kv_len - self.q_len
    }

    /// Number of leading keys query row `i` may attend to.
    pub fn visible(&self, i: usize) -> usize {
        if self.causal {
            self.offset() + i + 1
        } else {
            self.kv_len
        }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Silu(usize),
    Exp(usize),
    Softplus(usize),
    Softmax(usize),
    RmsNorm { x: usize, gain: usize, eps: T },
    SliceLast { x: usize, start: usize },
    Concat1(usize, usize),
    Reshape(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Attention { q: usize, k: usize, v: usize, dims: AttnDims, probs: Vec<T> },
    Rope { x: usize, seq_len: usize, n_heads: usize, head_dim: usize, offset: usize, base: f64 },
    CausalConv { x: usize, w: usize, bias: usize, prefix: Option<Tensor<T>> },
    Scan { u: usize, delta: usize, a: usize, b: usize, c: usize, h0: Option<Tensor<T>>, states: Vec<T> },
    TopKGate { logits: usize, selected: Vec<Vec<usize>> },
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterRows { x: usize, idx: Vec<usize> },
    Select { x: usize, pairs: Vec<(usize, usize)> },
    ScaleRows { x: usize, s: usize },
    SumAll(usize),
    SumRows(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<T>, denom: T, probs: Vec<T> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one computation (typically one training step or one decode call).
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `d loss / d var`; zero when `var` does not influence the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get_mut(var.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        check_finite("leaf", &value)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.insert(value, false)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.insert(value, true)
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var<'_, T>> {
        check_finite(name, &value)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Row-stochastic attention weights `[batch, heads, q_len, kv_len]` saved by an attention op.
    pub fn attention_probs(&self, var: Var<'_, T>) -> Option<(AttnDims, Vec<T>)> {
        match &self.nodes.borrow()[var.id].op {
            Op::Attention { dims, probs, .. } => Some((*dims, probs.clone())),
            _ => None,
        }
    }

    /// Computes `d loss / d node` for every node that depends on a trainable leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, contrib: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn needs<T: Real>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn like<T: Real>(nodes: &[Node<T>], id: usize) -> Tensor<T> {
    Tensor::zeros(nodes[id].value.shape())
}

/// Sums `g` (shaped like the larger operand) down to a trailing-suffix shape.
fn reduce_to<T: Real>(g: &[T], shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let m = out.numel().max(1);
    let o = out.data_mut();
    for (i, &v) in g.iter().enumerate() {
        o[i % m] += v;
    }
    out
}

fn map_grad<T: Real>(g: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
    Tensor::new(g.shape(), g.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect()).expect("shape")
}

#[allow(clippy::too_many_lines)]
fn backprop<T: Real>(
    nodes: &[Node<T>],
    op: &Op<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(nodes, *a) {
                accumulate(nodes, grads, *a, g.clone());
            }
            if needs(nodes, *b) {
                accumulate(nodes, grads, *b, reduce_to(g.data(), val(*b).shape()));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let m = bv.numel().max(1);
            if needs(nodes, *a) {
                accumulate(nodes, grads, *a, map_grad(g, |i, gi| gi * bv.data()[i % m]));
            }
            if needs(nodes, *b) {
                let prod: Vec<T> = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *b, reduce_to(&prod, bv.shape()));
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, map_grad(g, |_, gi| gi * *c)),
        Op::MatMul(a, w) => {
            let (av, wv) = (val(*a), val(*w));
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            if needs(nodes, *a) {
                let mut ga = like(nodes, *a);
                matmul_nt_into(g.data(), wv.data(), n, k, ga.data_mut());
                accumulate(nodes, grads, *a, ga);
            }
            if needs(nodes, *w) {
                let mut gw = like(nodes, *w);
                matmul_tn_into(av.data(), g.data(), k, n, gw.data_mut());
                accumulate(nodes, grads, *w, gw);
            }
        }
        Op::MatMulNT(a, w) => {
            let (av, wv) = (val(*a), val(*w));
            let (n, k) = (wv.shape()[0], wv.shape()[1]);
            if needs(nodes, *a) {
                let mut ga = like(nodes, *a);
                matmul_into(g.data(), wv.data(), n, k, ga.data_mut());
                accumulate(nodes, grads, *a, ga);
            }
            if needs(nodes, *w) {
                let mut gw = like(nodes, *w);
                matmul_tn_into(g.data(), av.data(), n, k, gw.data_mut());
                accumulate(nodes, grads, *w, gw);
            }
        }
        Op::Silu(a) => {
            let x = val(*a);
            accumulate(
                nodes,
                grads,
                *a,
                map_grad(g, |i, gi| {
                    let xv = x.data()[i];
                    let s = sigmoid(xv);
                    gi * s * (T::one() + xv * (T::one() - s))
                }),
            );
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, map_grad(g, |i, gi| gi * out.data()[i])),
        Op::Softplus(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, map_grad(g, |i, gi| gi * sigmoid(x.data()[i])));
        }
        Op::Softmax(a) => {
            let n = out.last_dim();
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_exact_mut(n).zip(out.data().chunks_exact(n)) {
                let s = dot(grow, yrow);
                for (gv, &y) in grow.iter_mut().zip(yrow) {
                    *gv = y * (*gv - s);
                }
            }
            accumulate(nodes, grads, *a, gx);
        }
        Op::RmsNorm { x, gain, eps } => {
            let (xv, gv) = (val(*x), val(*gain));
            let n = xv.last_dim();
            let nf = T::c(n as f64);
            let mut gx = like(nodes, *x);
            let mut gg = like(nodes, *gain);
            for ((xrow, grow), dxrow) in
                xv.data().chunks_exact(n).zip(g.data().chunks_exact(n)).zip(gx.data_mut().chunks_exact_mut(n))
            {
                let r = inv_rms(xrow, *eps);
                let mut s = T::zero();
                for i in 0..n {
                    s += gv.data()[i] * grow[i] * xrow[i];
                    gg.data_mut()[i] += grow[i] * xrow[i] * r;
                }
                let c = r * r * r * s / nf;
                for i in 0..n {
                    dxrow[i] = r * gv.data()[i] * grow[i] - c * xrow[i];
                }
            }
            accumulate(nodes, grads, *x, gx);
            if needs(nodes, *gain) {
                accumulate(nodes, grads, *gain, gg);
            }
        }
        Op::SliceLast { x, start } => {
            let mut gx = like(nodes, *x);
            let full = gx.last_dim();
            let part = g.last_dim();
            for (dst, src) in gx.data_mut().chunks_exact_mut(full).zip(g.data().chunks_exact(part)) {
                dst[*start..*start + part].copy_from_slice(src);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Concat1(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (ta, tb, f) = (sa[1], sb[1], sa[2]);
            let mut ga = like(nodes, *a);
            let mut gb = like(nodes, *b);
            for bi in 0..sa[0] {
                let row = &g.data()[bi * (ta + tb) * f..(bi + 1) * (ta + tb) * f];
                ga.data_mut()[bi * ta * f..(bi + 1) * ta * f].copy_from_slice(&row[..ta * f]);
                gb.data_mut()[bi * tb * f..(bi + 1) * tb * f].copy_from_slice(&row[ta * f..]);
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Reshape(a) => {
            let ga = g.clone().reshape(val(*a).shape()).expect("same numel");
            accumulate(nodes, grads, *a, ga);
        }
        Op::Embedding { table, ids } => {
            let mut gt = like(nodes, *table);
            let d = gt.last_dim();
            for (&id, grow) in ids.iter().zip(g.data().chunks_exact(d)) {
                axpy(T::one(), grow, &mut gt.data_mut()[id * d..(id + 1) * d]);
            }
            accumulate(nodes, grads, *table, gt);
        }
        Op::Attention { q, k, v, dims, probs } => attention_backward(nodes, grads, g, *q, *k, *v, dims, probs),
        Op::Rope { x, seq_len, n_heads, head_dim, offset, base } => {
            let mut gx = g.clone();
            apply_rope(gx.data_mut(), *seq_len, *n_heads, *head_dim, *offset, *base, true);
            accumulate(nodes, grads, *x, gx);
        }
        Op::CausalConv { x, w, bias, prefix } => conv_backward(nodes, grads, g, *x, *w, *bias, prefix.as_ref()),
        Op::Scan { u, delta, a, b, c, h0, states } => {
            scan_backward(nodes, grads, g, [*u, *delta, *a, *b, *c], h0.as_ref(), states)
        }
        Op::TopKGate { logits, selected } => {
            let n = out.last_dim();
            let mut gl = like(nodes, *logits);
            for (r, sel) in selected.iter().enumerate() {
                let w = &out.data()[r * n..(r + 1) * n];
                let grow = &g.data()[r * n..(r + 1) * n];
                let s: T = sel.iter().map(|&j| w[j] * grow[j]).sum();
                for &j in sel {
                    gl.data_mut()[r * n + j] = w[j] * (grow[j] - s);
                }
            }
            accumulate(nodes, grads, *logits, gl);
        }
        Op::GatherRows { x, idx } => {
            let mut gx = like(nodes, *x);
            let d = gx.last_dim();
            for (&r, grow) in idx.iter().zip(g.data().chunks_exact(d)) {
                axpy(T::one(), grow, &mut gx.data_mut()[r * d..(r + 1) * d]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::ScatterRows { x, idx } => {
            let d = g.last_dim();
            let mut data = Vec::with_capacity(idx.len() * d);
            for &r in idx {
                data.extend_from_slice(&g.data()[r * d..(r + 1) * d]);
            }
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape(), data).expect("shape"));
        }
        Op::Select { x, pairs } => {
            let mut gx = like(nodes, *x);
            let n = gx.last_dim();
            for (&(r, c), &gi) in pairs.iter().zip(g.data()) {
                gx.data_mut()[r * n + c] += gi;
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::ScaleRows { x, s } => {
            let (xv, sv) = (val(*x), val(*s));
            let d = xv.last_dim();
            if needs(nodes, *x) {
                accumulate(nodes, grads, *x, map_grad(g, |i, gi| gi * sv.data()[i / d]));
            }
            if needs(nodes, *s) {
                let gs: Vec<T> =
                    g.data().chunks_exact(d).zip(xv.data().chunks_exact(d)).map(|(gr, xr)| dot(gr, xr)).collect();
                accumulate(nodes, grads, *s, Tensor::new(sv.shape(), gs).expect("shape"));
            }
        }
        Op::SumAll(a) => {
            let gi = g.item();
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), gi));
        }
        Op::SumRows(a) => {
            let n = g.numel();
            accumulate(nodes, grads, *a, map_grad(&Tensor::zeros(val(*a).shape()), |i, _| g.data()[i % n]));
        }
        Op::CrossEntropy { logits, targets, mask, denom, probs } => {
            let scale = g.item() / *denom;
            let mut gl = like(nodes, *logits);
            let v = gl.last_dim();
            for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                if m == T::zero() {
                    continue;
                }
                let row = &mut gl.data_mut()[r * v..(r + 1) * v];
                for (j, gv) in row.iter_mut().enumerate() {
                    let onehot = if j == t { T::one() } else { T::zero() };
                    *gv = (probs[r * v + j] - onehot) * m * scale;
                }
            }
            accumulate(nodes, grads, *logits, gl);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    g: &Tensor<T>,
    q: usize,
    k: usize,
    v: usize,
    dims: &AttnDims,
    probs: &[T],
) {
    let AttnDims { batch, q_len, kv_len, n_heads, n_kv_heads, head_dim: d, .. } = *dims;
    let rep = n_heads / n_kv_heads;
    let scale = T::one() / T::c(d as f64).sqrt();
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let (qw, kw) = (n_heads * d, n_kv_heads * d);
    let mut gq = like(nodes, q);
    let mut gk = like(nodes, k);
    let mut gv = like(nodes, v);
    let mut dp = vec![T::zero(); kv_len];
    for b in 0..batch {
        for h in 0..n_heads {
            let kvh = h / rep;
            for i in 0..q_len {
                let visible = dims.visible(i);
                let p = &probs[((b * n_heads + h) * q_len + i) * kv_len..][..kv_len];
                let go = &g.data()[(b * q_len + i) * qw + h * d..][..d];
                let mut s = T::zero();
                for j in 0..visible {
                    let vrow = &vv.data()[(b * kv_len + j) * kw + kvh * d..][..d];
                    dp[j] = dot(go, vrow);
                    s += p[j] * dp[j];
                    axpy(p[j], go, &mut gv.data_mut()[(b * kv_len + j) * kw + kvh * d..][..d]);
                }
                let qrow = &qv.data()[(b * q_len + i) * qw + h * d..][..d];
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - s) * scale;
                    let krow = &kv.data()[(b * kv_len + j) * kw + kvh * d..][..d];
                    axpy(ds, krow, &mut gq.data_mut()[(b * q_len + i) * qw + h * d..][..d]);
                    axpy(ds, qrow, &mut gk.data_mut()[(b * kv_len + j) * kw + kvh * d..][..d]);
                }
            }
        }
    }
    accumulate(nodes, grads, q, gq);
    accumulate(nodes, grads, k, gk);
    accumulate(nodes, grads, v, gv);
}

/// Rotates pairs `(i, i + head_dim/2)` of every head by `pos * base^(-2i/head_dim)`.
/// Rows are `[batch * seq_len]`; row `r` sits at position `offset + r % seq_len`.
fn apply_rope<T: Real>(
    data: &mut [T],
    seq_len: usize,
    n_heads: usize,
    head_dim: usize,
    offset: usize,
    base: f64,
    inverse: bool,
) {
    let width = n_heads * head_dim;
    let half = head_dim / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    let inv_freq: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
    for (row_idx, row) in data.chunks_exact_mut(width).enumerate() {
        let pos = (offset + row_idx % seq_len.max(1)) as f64;
        let rot: Vec<(T, T)> = inv_freq
            .iter()
            .map(|&f| {
                let (sin, cos) = (sign * pos * f).sin_cos();
                (T::c(sin), T::c(cos))
            })
            .collect();
        for head in row.chunks_exact_mut(head_dim) {
            for (i, &(sin, cos)) in rot.iter().enumerate() {
                let (x1, x2) = (head[i], head[i + half]);
                head[i] = x1 * cos - x2 * sin;
                head[i + half] = x1 * sin + x2 * cos;
            }
        }
    }
}

fn conv_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    g: &Tensor<T>,
    x: usize,
    w: usize,
    bias: usize,
    prefix: Option<&Tensor<T>>,
) {
    let (xv, wv) = (&nodes[x].value, &nodes[w].value);
    let (batch, len, di) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let kk = wv.shape()[1];
    let mut gx = like(nodes, x);
    let mut gw = like(nodes, w);
    let mut gb = like(nodes, bias);
    for b in 0..batch {
        for t in 0..len {
            let grow = &g.data()[(b * len + t) * di..][..di];
            axpy(T::one(), grow, gb.data_mut());
            for j in 0..kk {
                let s = t + j; // index into the padded sequence
                let src: Option<&[T]> = if s + 1 >= kk {
                    Some(&xv.data()[(b * len + s + 1 - kk) * di..][..di])
                } else {
                    prefix.map(|p| &p.data()[(b * (kk - 1) + s) * di..][..di])
                };
                if let Some(src) = src {
                    for d in 0..di {
                        gw.data_mut()[d * kk + j] += grow[d] * src[d];
                    }
                }
                if s + 1 >= kk {
                    let dst = &mut gx.data_mut()[(b * len + s + 1 - kk) * di..][..di];
                    for d in 0..di {
                        dst[d] += grow[d] * wv.data()[d * kk + j];
                    }
                }
            }
        }
    }
    accumulate(nodes, grads, x, gx);
    accumulate(nodes, grads, w, gw);
    accumulate(nodes, grads, bias, gb);
}

fn scan_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    g: &Tensor<T>,
    ids: [usize; 5],
    h0: Option<&Tensor<T>>,
    states: &[T],
) {
    let [u, delta, a, bm, cm] = ids;
    let (uv, dv, av, bv, cv) =
        (&nodes[u].value, &nodes[delta].value, &nodes[a].value, &nodes[bm].value, &nodes[cm].value);
    let (batch, len, di) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
    let n = av.shape()[1];
    let mut gu = like(nodes, u);
    let mut gd = like(nodes, delta);
    let mut ga = like(nodes, a);
    let mut gb = like(nodes, bm);
    let mut gc = like(nodes, cm);
    let zeros = vec![T::zero(); di * n];
    let mut dh = vec![T::zero(); di * n];
    for b in 0..batch {
        dh.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..len).rev() {
            let h = &states[(b * len + t) * di * n..][..di * n];
            let hprev: &[T] = if t > 0 {
                &states[(b * len + t - 1) * di * n..][..di * n]
            } else {
                h0.map(|h| &h.data()[b * di * n..][..di * n]).unwrap_or(&zeros)
            };
            let row = (b * len + t) * di;
            let brow = &bv.data()[(b * len + t) * n..][..n];
            let crow = &cv.data()[(b * len + t) * n..][..n];
            let gcrow = &mut gc.data_mut()[(b * len + t) * n..][..n];
            let mut gbrow = vec![T::zero(); n];
            for d in 0..di {
                let gy = g.data()[row + d];
                let dl = dv.data()[row + d];
                let uu = uv.data()[row + d];
                let arow = &av.data()[d * n..][..n];
                let garow = &mut ga.data_mut()[d * n..][..n];
                let dhrow = &mut dh[d * n..][..n];
                let hrow = &h[d * n..][..n];
                let hprow = &hprev[d * n..][..n];
                let (mut gdl, mut guu) = (T::zero(), T::zero());
                for s in 0..n {
                    dhrow[s] += gy * crow[s];
                    gcrow[s] += gy * hrow[s];
                    let abar = (dl * arow[s]).exp();
                    let gh = dhrow[s];
                    let gabar = gh * hprow[s] * abar;
                    gdl += gabar * arow[s] + gh * uu * brow[s];
                    garow[s] += gabar * dl;
                    gbrow[s] += gh * dl * uu;
                    guu += gh * dl * brow[s];
                    dhrow[s] = gh * abar;
                }
                gd.data_mut()[row + d] += gdl;
                gu.data_mut()[row + d] += guu;
            }
            axpy(T::one(), &gbrow, &mut gb.data_mut()[(b * len + t) * n..][..n]);
        }
    }
    accumulate(nodes, grads, u, gu);
    accumulate(nodes, grads, delta, gd);
    accumulate(nodes, grads, a, ga);
    accumulate(nodes, grads, bm, gb);
    accumulate(nodes, grads, cm, gc);
}

#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// Elementwise sum; `rhs` may cover a trailing suffix of `self`'s shape.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let out = kernels::add(&self.value(), &rhs.value())?;
        self.tape.push("add", out, Op::Add(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// Elementwise product; `rhs` may cover a trailing suffix of `self`'s shape.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let out = kernels::mul(&self.value(), &rhs.value())?;
        self.tape.push("mul", out, Op::Mul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::c(c);
        let x = self.value();
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| v * c).collect())?;
        self.tape.push("scale", out, Op::Scale(self.id, c), &[self.id])
    }

    /// `self[..., k] · w[k, n]`
    pub fn matmul(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        let out = kernels::matmul(&self.value(), &w.value())?;
        self.tape.push("matmul", out, Op::MatMul(self.id, w.id), &[self.id, w.id])
    }

    /// `self[..., k] · w[n, k]^T`
    pub fn matmul_nt(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        let out = kernels::matmul_nt(&self.value(), &w.value())?;
        self.tape.push("matmul_nt", out, Op::MatMulNT(self.id, w.id), &[self.id, w.id])
    }

    pub fn silu(self) -> Result<Var<'t, T>> {
        let out = kernels::silu(&self.value());
        self.tape.push("silu", out, Op::Silu(self.id), &[self.id])
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        let out = kernels::exp(&self.value());
        self.tape.push("exp", out, Op::Exp(self.id), &[self.id])
    }

    pub fn softplus(self) -> Result<Var<'t, T>> {
        let out = kernels::softplus(&self.value());
        self.tape.push("softplus", out, Op::Softplus(self.id), &[self.id])
    }

    pub fn softmax(self) -> Result<Var<'t, T>> {
        let out = kernels::softmax(&self.value());
        self.tape.push("softmax", out, Op::Softmax(self.id), &[self.id])
    }

    pub fn rmsnorm(self, gain: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.same_tape(&gain);
        let out = kernels::rmsnorm(&self.value(), &gain.value(), eps)?;
        let op = Op::RmsNorm { x: self.id, gain: gain.id, eps: T::c(eps) };
        self.tape.push("rmsnorm", out, op, &[self.id, gain.id])
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let full = x.last_dim();
        if start + len > full {
            return Err(mismatch("slice_last", format!("[{start}, {}) of {full}", start + len)));
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let mut data = Vec::with_capacity(x.rows() * len);
        for row in x.data().chunks_exact(full) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(&shape, data)?;
        self.tape.push("slice_last", out, Op::SliceLast { x: self.id, start }, &[self.id])
    }

    /// Concatenates `[B, T1, F]` and `[B, T2, F]` along the sequence axis.
    pub fn concat_seq(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(mismatch("concat_seq", format!("{sa:?} with {sb:?}")));
        }
        let (ta, tb, f) = (sa[1], sb[1], sa[2]);
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for bi in 0..sa[0] {
            data.extend_from_slice(&a.data()[bi * ta * f..(bi + 1) * ta * f]);
            data.extend_from_slice(&b.data()[bi * tb * f..(bi + 1) * tb * f]);
        }
        let out = Tensor::new(&[sa[0], ta + tb, f], data)?;
        self.tape.push("concat_seq", out, Op::Concat1(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Row lookup in a `[vocab, d]` table; output shape is `lead ++ [d]`.
    pub fn embedding(self, ids: &[usize], lead: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        let (vocab, d) = (table.shape()[0], table.last_dim());
        if lead.iter().product::<usize>() != ids.len() {
            return Err(mismatch("embedding", format!("{} ids for shape {lead:?}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::InvalidArgument {
                op: "embedding",
                detail: format!("token id {bad} >= vocab {vocab}"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        self.tape.push("embedding", out, Op::Embedding { table: self.id, ids: ids.to_vec() }, &[self.id])
    }

    /// Fused causal grouped-query attention.
    ///
    /// `self` is `q: [B, S, H*D]`, `k, v: [B, T, Hkv*D]` with `T >= S`; query
    /// row `i` sits at absolute position `T - S + i` and sees keys `0..=T-S+i`.
    pub fn attention(self, k: Var<'t, T>, v: Var<'t, T>, n_heads: usize, n_kv_heads: usize) -> Result<Var<'t, T>> {
        self.attention_masked(k, v, n_heads, n_kv_heads, true)
    }

    /// As [`Var::attention`]; with `causal = false` every query sees every key.
    pub fn attention_masked(
        self,
        k: Var<'t, T>,
        v: Var<'t, T>,
        n_heads: usize,
        n_kv_heads: usize,
        causal: bool,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&k);
        self.same_tape(&v);
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (qs, ks) = (qv.shape(), kv.shape());
        if qs.len() != 3 || ks.len() != 3 || kv.shape() != vv.shape() || qs[0] != ks[0] || qs[1] > ks[1] {
            return Err(mismatch("attention", format!("q {qs:?}, k {ks:?}, v {:?}", vv.shape())));
        }
        if n_kv_heads == 0 || !n_heads.is_multiple_of(n_kv_heads) || qs[2] % n_heads != 0 {
            return Err(mismatch("attention", format!("{n_heads} heads over {n_kv_heads} kv heads, width {}", qs[2])));
        }
        let d = qs[2] / n_heads;
        if ks[2] != n_kv_heads * d {
            return Err(mismatch("attention", format!("kv width {} != {n_kv_heads} x {d}", ks[2])));
        }
        let dims = AttnDims { batch: qs[0], q_len: qs[1], kv_len: ks[1], n_heads, n_kv_heads, head_dim: d, causal };
        let (out, probs) = attention_forward(&qv, &kv, &vv, &dims);
        let op = Op::Attention { q: self.id, k: k.id, v: v.id, dims, probs };
        self.tape.push("attention", out, op, &[self.id, k.id, v.id])
    }

    /// Rotary phase on `[B, S, H*D]` at absolute positions `offset..offset+S`.
    pub fn rope(self, n_heads: usize, head_dim: usize, offset: usize, base: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || s[2] != n_heads * head_dim || !head_dim.is_multiple_of(2) {
            return Err(mismatch("rope", format!("{s:?} for {n_heads} heads of {head_dim}")));
        }
        let seq_len = s[1];
        let mut out = (*x).clone();
        apply_rope(out.data_mut(), seq_len, n_heads, head_dim, offset, base, false);
        let op = Op::Rope { x: self.id, seq_len, n_heads, head_dim, offset, base };
        self.tape.push("rope", out, op, &[self.id])
    }

    /// Depthwise causal convolution over `[B, L, C]` with kernel `w: [C, K]`
    /// and `bias: [C]`. `prefix` supplies the `K-1` inputs preceding the
    /// sequence (zeros when absent).
    pub fn causal_conv(self, w: Var<'t, T>, bias: Var<'t, T>, prefix: Option<&Tensor<T>>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        self.same_tape(&bias);
        let (xv, wv, bv) = (self.value(), w.value(), bias.value());
        let xs = xv.shape();
        if xs.len() != 3 || wv.shape().len() != 2 || wv.shape()[0] != xs[2] || bv.shape() != [xs[2]] {
            return Err(mismatch("causal_conv", format!("x {xs:?}, w {:?}, bias {:?}", wv.shape(), bv.shape())));
        }
        let (batch, len, ch) = (xs[0], xs[1], xs[2]);
        let kk = wv.shape()[1];
        if let Some(p) = prefix {
            if p.shape() != [batch, kk - 1, ch] {
                return Err(mismatch("causal_conv", format!("prefix {:?}", p.shape())));
            }
        }
        let mut out = Tensor::zeros(xs);
        for b in 0..batch {
            for t in 0..len {
                let orow = &mut out.data_mut()[(b * len + t) * ch..][..ch];
                orow.copy_from_slice(bv.data());
                for j in 0..kk {
                    let s = t + j;
                    let src: &[T] = if s + 1 >= kk {
                        &xv.data()[(b * len + s + 1 - kk) * ch..][..ch]
                    } else if let Some(p) = prefix {
                        &p.data()[(b * (kk - 1) + s) * ch..][..ch]
                    } else {
                        continue;
                    };
                    for c in 0..ch {
                        orow[c] += wv.data()[c * kk + j] * src[c];
                    }
                }
            }
        }
        let op = Op::CausalConv { x: self.id, w: w.id, bias: bias.id, prefix: prefix.cloned() };
        self.tape.push("causal_conv", out, op, &[self.id, w.id, bias.id])
    }

    /// Selective scan: with `self = u: [B, L, C]`, `delta: [B, L, C]`,
    /// `a: [C, N]`, `b, c: [B, L, N]` runs
    /// `h_t = exp(delta_t * a) * h_{t-1} + (delta_t * u_t) ⊗ b_t`,
    /// `y_t = h_t · c_t`. Returns `y: [B, L, C]` and the final state `[B, C, N]`.
    pub fn selective_scan(
        self,
        delta: Var<'t, T>,
        a: Var<'t, T>,
        b: Var<'t, T>,
        c: Var<'t, T>,
        h0: Option<&Tensor<T>>,
    ) -> Result<(Var<'t, T>, Tensor<T>)> {
        for other in [&delta, &a, &b, &c] {
            self.same_tape(other);
        }
        let (uv, dv, av, bv, cv) = (self.value(), delta.value(), a.value(), b.value(), c.value());
        let us = uv.shape();
        let ok = us.len() == 3
            && dv.shape() == us
            && av.shape().len() == 2
            && av.shape()[0] == us[2]
            && bv.shape() == [us[0], us[1], av.shape()[1]]
            && cv.shape() == bv.shape();
        if !ok {
            return Err(mismatch(
                "selective_scan",
                format!("u {us:?}, delta {:?}, a {:?}, b {:?}, c {:?}", dv.shape(), av.shape(), bv.shape(), cv.shape()),
            ));
        }
        let (batch, len, di, n) = (us[0], us[1], us[2], av.shape()[1]);
        if let Some(h) = h0 {
            if h.shape() != [batch, di, n] {
                return Err(mismatch("selective_scan", format!("h0 {:?}", h.shape())));
            }
        }
        let mut y = Tensor::zeros(us);
        let mut states = vec![T::zero(); batch * len * di * n];
        let mut h = vec![T::zero(); di * n];
        for bi in 0..batch {
            match h0 {
                Some(h0) => h.copy_from_slice(&h0.data()[bi * di * n..][..di * n]),
                None => h.iter_mut().for_each(|v| *v = T::zero()),
            }
            for t in 0..len {
                let row = (bi * len + t) * di;
                let brow = &bv.data()[(bi * len + t) * n..][..n];
                let crow = &cv.data()[(bi * len + t) * n..][..n];
                for d in 0..di {
                    let dl = dv.data()[row + d];
                    let du = dl * uv.data()[row + d];
                    let arow = &av.data()[d * n..][..n];
                    let hrow = &mut h[d * n..][..n];
                    for s in 0..n {
                        hrow[s] = (dl * arow[s]).exp() * hrow[s] + du * brow[s];
                    }
                    y.data_mut()[row + d] = dot(hrow, crow);
                }
                states[(bi * len + t) * di * n..][..di * n].copy_from_slice(&h);
            }
        }
        let final_state = if len == 0 {
            h0.cloned().unwrap_or_else(|| Tensor::zeros(&[batch, di, n]))
        } else {
            let mut f = Vec::with_capacity(batch * di * n);
            for bi in 0..batch {
                f.extend_from_slice(&states[(bi * len + len - 1) * di * n..][..di * n]);
            }
            Tensor::new(&[batch, di, n], f)?
        };
        check_finite("selective_scan", &final_state)?;
        let op = Op::Scan { u: self.id, delta: delta.id, a: a.id, b: b.id, c: c.id, h0: h0.cloned(), states };
        let yv = self.tape.push("selective_scan", y, op, &[self.id, delta.id, a.id, b.id, c.id])?;
        Ok((yv, final_state))
    }

    /// Router gates from `[T, n]` logits: softmax over each row's top-`k`
    /// entries, zero elsewhere. Also returns the selected indices per row.
    pub fn top_k_gate(self, k: usize) -> Result<(Var<'t, T>, Vec<Vec<usize>>)> {
        let x = self.value();
        let n = x.last_dim();
        if k == 0 || k > n {
            return Err(NumericsError::InvalidArgument { op: "top_k_gate", detail: format!("k = {k} of {n}") });
        }
        let mut out = Tensor::zeros(x.shape());
        let mut selected = Vec::with_capacity(x.rows());
        for (row, orow) in x.data().chunks_exact(n).zip(out.data_mut().chunks_exact_mut(n)) {
            let sel = kernels::top_k(row, k);
            let mut w: Vec<T> = sel.iter().map(|&j| row[j]).collect();
            softmax_in_place(&mut w);
            for (&j, &wj) in sel.iter().zip(&w) {
                orow[j] = wj;
            }
            selected.push(sel);
        }
        let op = Op::TopKGate { logits: self.id, selected: selected.clone() };
        let v = self.tape.push("top_k_gate", out, op, &[self.id])?;
        Ok((v, selected))
    }

    /// Rows `idx` of a `[rows, d]` matrix.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = x.last_dim();
        if x.shape().len() != 2 || idx.iter().any(|&r| r >= x.rows()) {
            return Err(mismatch("gather_rows", format!("{:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            data.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], data)?;
        self.tape.push("gather_rows", out, Op::GatherRows { x: self.id, idx: idx.to_vec() }, &[self.id])
    }

    /// Scatter-adds the rows of `[m, d]` into a zero `[rows, d]` matrix at `idx`.
    pub fn scatter_rows(self, idx: &[usize], rows: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = x.last_dim();
        if x.shape().len() != 2 || x.rows() != idx.len() || idx.iter().any(|&r| r >= rows) {
            return Err(mismatch("scatter_rows", format!("{:?} into {rows} rows", x.shape())));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        for (&r, src) in idx.iter().zip(x.data().chunks_exact(d)) {
            axpy(T::one(), src, &mut out.data_mut()[r * d..(r + 1) * d]);
        }
        self.tape.push("scatter_rows", out, Op::ScatterRows { x: self.id, idx: idx.to_vec() }, &[self.id])
    }

    /// Picks entries `(row, col)` of a `[rows, n]` matrix into a vector.
    pub fn select(self, pairs: &[(usize, usize)]) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = x.last_dim();
        if pairs.iter().any(|&(r, c)| r >= x.rows() || c >= n) {
            return Err(mismatch("select", format!("index outside {:?}", x.shape())));
        }
        let data = pairs.iter().map(|&(r, c)| x.data()[r * n + c]).collect();
        let out = Tensor::new(&[pairs.len()], data)?;
        self.tape.push("select", out, Op::Select { x: self.id, pairs: pairs.to_vec() }, &[self.id])
    }

    /// Multiplies row `r` of `[m, d]` by `s[r]`.
    pub fn scale_rows(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&s);
        let (x, sv) = (self.value(), s.value());
        let d = x.last_dim();
        if sv.shape() != [x.rows()] {
            return Err(mismatch("scale_rows", format!("{:?} by {:?}", x.shape(), sv.shape())));
        }
        let data = x.data().iter().enumerate().map(|(i, &v)| v * sv.data()[i / d]).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.tape.push("scale_rows", out, Op::ScaleRows { x: self.id, s: s.id }, &[self.id, s.id])
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let total = self.value().data().iter().copied().sum();
        self.tape.push("sum", Tensor::scalar(total), Op::SumAll(self.id), &[self.id])
    }

    /// Sums all leading axes, leaving `[last_dim]`.
    pub fn sum_rows(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = x.last_dim();
        let mut out = Tensor::zeros(&[n]);
        for row in x.data().chunks_exact(n) {
            axpy(T::one(), row, out.data_mut());
        }
        self.tape.push("sum_rows", out, Op::SumRows(self.id), &[self.id])
    }

    /// Mean token cross-entropy of `[..., V]` logits over rows whose mask is
    /// nonzero (mask values weight rows). Zero when the mask is empty.
    pub fn cross_entropy(self, targets: &[usize], mask: &[f64]) -> Result<Var<'t, T>> {
        let x = self.value();
        let v = x.last_dim();
        if targets.len() != x.rows() || mask.len() != x.rows() {
            return Err(mismatch(
                "cross_entropy",
                format!("{} targets / {} mask for {} rows", targets.len(), mask.len(), x.rows()),
            ));
        }
        let mask: Vec<T> = mask.iter().map(|&m| T::c(m)).collect();
        let denom: T = mask.iter().copied().sum();
        let mut probs = vec![T::zero(); x.numel()];
        let mut total = T::zero();
        for (r, row) in x.data().chunks_exact(v).enumerate() {
            if mask[r] == T::zero() {
                continue;
            }
            if targets[r] >= v {
                return Err(NumericsError::InvalidArgument {
                    op: "cross_entropy",
                    detail: format!("target {} >= vocab {v}", targets[r]),
                });
            }
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            let max = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            softmax_in_place(p);
            total += mask[r] * (lse - row[targets[r]]);
        }
        let (loss, denom) = if denom > T::zero() { (total / denom, denom) } else { (T::zero(), T::one()) };
        let op = Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), mask, denom, probs };
        self.tape.push("cross_entropy", Tensor::scalar(loss), op, &[self.id])
    }
}

fn attention_forward<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, dims: &AttnDims) -> (Tensor<T>, Vec<T>) {
    let AttnDims { batch, q_len, kv_len, n_heads, n_kv_heads, head_dim: d, .. } = *dims;
    let rep = n_heads / n_kv_heads;
    let scale = T::one() / T::c(d as f64).sqrt();
    let (qw, kw) = (n_heads * d, n_kv_heads * d);
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![T::zero(); batch * n_heads * q_len * kv_len];
    for b in 0..batch {
        for h in 0..n_heads {
            let kvh = h / rep;
            for i in 0..q_len {
                let visible = dims.visible(i);
                let qrow = &q.data()[(b * q_len + i) * qw + h * d..][..d];
                let p = &mut probs[((b * n_heads + h) * q_len + i) * kv_len..][..visible];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qrow, &k.data()[(b * kv_len + j) * kw + kvh * d..][..d]) * scale;
                }
                softmax_in_place(p);
                let orow = &mut out.data_mut()[(b * q_len + i) * qw + h * d..][..d];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(pj, &v.data()[(b * kv_len + j) * kw + kvh * d..][..d], orow);
                }
            }
        }
    }
    (out, probs)
}
