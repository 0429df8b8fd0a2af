//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs for
//! the backward pass. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients; [`Graph::accumulate_param_grads`] then adds the
//! gradients of parameter leaves into the [`ParamStore`] grad buffers
//! (additively: callers zero them).

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::attention::{self, SeqLayout};
use crate::error::{NumericsError, Result};
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    GatherRows {
        table: Var,
        offsets: Vec<usize>,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<SeqLayout>,
        probs: Vec<T>,
    },
    AttentionMean {
        q: Var,
        k: Var,
        heads: usize,
        layout: Arc<SeqLayout>,
        probs: Vec<T>,
    },
    GatherElems {
        x: Var,
        indices: Vec<Option<usize>>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
    NormalizedNll {
        p: Var,
        targets: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(NumericsError::dim(op, format!("expected matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (readable through [`Graph::grad`]).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter onto the tape. Repeated calls for the same id reuse
    /// the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let mut t = store.tensor(id).clone();
        t.clear_grad();
        let v = self.push(t, Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul", self.value(a))?;
        let (k2, n) = check_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(NumericsError::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x W + b` with `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = check_2d("linear", self.value(x))?;
        let (w_in, d_out) = check_2d("linear", self.value(w))?;
        if d_in != w_in {
            return Err(NumericsError::dim("linear", format!("input width {d_in}, weight rows {w_in}")));
        }
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != d_out {
                return Err(NumericsError::dim("linear", format!("bias {} for width {d_out}", bias.len())));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(n, d_in, d_out, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, d_out], out)?, Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let t = Tensor::from_fn(va.shape(), |i| va.data()[i] * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Output row `r` is the sum of `table` rows listed in `rows[r]`; an empty
    /// list gives a zero row.
    pub fn gather_rows(&mut self, table: Var, rows: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(table);
        let (n_table, width) = check_2d("gather_rows", t)?;
        if rows.is_empty() {
            return Err(NumericsError::dim("gather_rows", "no output rows"));
        }
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        let mut out = vec![T::zero(); rows.len() * width];
        for (r, list) in rows.iter().enumerate() {
            let dst = &mut out[r * width..(r + 1) * width];
            for &i in list {
                if i >= n_table {
                    return Err(NumericsError::dim(
                        "gather_rows",
                        format!("row index {i} out of range for {n_table} rows"),
                    ));
                }
                add_into(dst, t.row(i));
                indices.push(i);
            }
            offsets.push(indices.len());
        }
        let rg = self.rg(table);
        let value = Tensor::new(&[rows.len(), width], out)?;
        Ok(self.push(value, Op::GatherRows { table, offsets, indices }, rg))
    }

    /// Picks single rows, in order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let lists: Vec<Vec<usize>> = rows.iter().map(|&r| vec![r]).collect();
        self.gather_rows(x, &lists)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| NumericsError::dim("concat_rows", "no inputs"))?;
        let width = check_2d("concat_rows", self.value(first))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = check_2d("concat_rows", self.value(p))?;
            if c != width {
                return Err(NumericsError::dim("concat_rows", format!("width {c} vs {width}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, width], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let width = vx.cols();
        if self.value(gain).len() != width || self.value(bias).len() != width {
            return Err(NumericsError::dim("layer_norm", "gain/bias width"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let unit = vec![T::one(); width];
        let zero = vec![T::zero(); width];
        let rows = vx.rows();
        let mut normalized = vec![T::zero(); vx.len()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let xr = vx.row(r);
            let nr = &mut normalized[r * width..(r + 1) * width];
            rstd.push(ops::layer_norm_row(xr, &unit, &zero, eps, nr));
            for i in 0..width {
                out[r * width + i] = nr[i] * g[i] + b[i];
            }
        }
        let t = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, normalized, rstd }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::from_fn(vx.shape(), |i| ops::gelu(vx.data()[i]));
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Inverted dropout. With `p == 0` this is the identity and no node is
    /// added.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let t = Tensor::from_fn(vx.shape(), |i| vx.data()[i] * mask[i]);
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    fn check_attention(&self, q: Var, k: Var, heads: usize, layout: &SeqLayout) -> Result<usize> {
        let (rows, width) = check_2d("attention", self.value(q))?;
        if self.value(k).shape() != self.value(q).shape() {
            return Err(NumericsError::dim("attention", "query/key shapes differ"));
        }
        if heads == 0 || width % heads != 0 {
            return Err(NumericsError::dim("attention", format!("width {width} not divisible by {heads} heads")));
        }
        if layout.rows() != rows {
            return Err(NumericsError::dim(
                "attention",
                format!("layout covers {} rows, input has {rows}", layout.rows()),
            ));
        }
        Ok(width)
    }

    /// Multi-head scaled dot-product attention within each packed sequence.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Arc<SeqLayout>) -> Result<Var> {
        let width = self.check_attention(q, k, heads, &layout)?;
        if self.value(v).shape() != self.value(q).shape() {
            return Err(NumericsError::dim("attention", "value shape differs"));
        }
        let probs = attention::attention_probs(self.value(q).data(), self.value(k).data(), width, heads, &layout);
        let mut out = vec![T::zero(); self.value(q).len()];
        attention::apply_probs(&probs, self.value(v).data(), width, heads, &layout, &mut out);
        let t = Tensor::new(self.value(q).shape(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(t, Op::Attention { q, k, v, heads, layout, probs }, rg))
    }

    /// Post-softmax weights of an attention node, laid out
    /// `[sequence][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } | Op::AttentionMean { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Head-averaged attention weights as a flat tensor holding one
    /// `[query][key]` block per sequence.
    pub fn attention_head_mean(&mut self, q: Var, k: Var, heads: usize, layout: Arc<SeqLayout>) -> Result<Var> {
        let width = self.check_attention(q, k, heads, &layout)?;
        let probs = attention::attention_probs(self.value(q).data(), self.value(k).data(), width, heads, &layout);
        let mean = attention::head_mean(&probs, heads, &layout);
        let n = mean.len();
        let t = Tensor::new(&[n], mean)?;
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(t, Op::AttentionMean { q, k, heads, layout, probs }, rg))
    }

    /// Gathers arbitrary flat elements into a new tensor; `None` yields zero.
    pub fn gather_elems(&mut self, x: Var, indices: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(indices.len());
        for idx in &indices {
            match *idx {
                Some(i) if i >= vx.len() => {
                    return Err(NumericsError::dim("gather_elems", format!("index {i} >= {}", vx.len())))
                }
                Some(i) => data.push(vx.data()[i]),
                None => data.push(T::zero()),
            }
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherElems { x, indices }, rg))
    }

    /// Mean over rows of `-sum_c t[c] * log softmax(z)[c]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(NumericsError::dim(
                "softmax_cross_entropy",
                format!("logits {:?} vs targets {:?}", z.shape(), targets.shape()),
            ));
        }
        let classes = z.cols();
        let rows = z.rows();
        let mut probs = Vec::with_capacity(z.len());
        let mut loss = T::zero();
        for r in 0..rows {
            let zr = z.row(r);
            let lse = ops::log_sum_exp(zr);
            for c in 0..classes {
                let t = targets.data()[r * classes + c];
                if t != T::zero() {
                    loss -= t * (zr[c] - lse);
                }
                probs.push((zr[c] - lse).exp());
            }
        }
        loss /= T::lit(rows as f64);
        let rg = self.rg(logits);
        let targets = targets.data().to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, targets, probs }, rg))
    }

    /// Mean over rows of `-sum_c t[c] * log(p[c] / sum_c p[c])` for
    /// nonnegative scores `p`.
    pub fn normalized_nll(&mut self, p: Var, targets: &Tensor<T>) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != targets.shape() {
            return Err(NumericsError::dim("normalized_nll", "shape mismatch"));
        }
        let classes = vp.cols();
        let rows = vp.rows();
        let tiny = T::min_positive_value();
        let mut loss = T::zero();
        for r in 0..rows {
            let pr = vp.row(r);
            let s: T = pr.iter().copied().sum::<T>().max(tiny);
            for c in 0..classes {
                let t = targets.data()[r * classes + c];
                if t != T::zero() {
                    loss -= t * (pr[c].max(tiny).ln() - s.ln());
                }
            }
        }
        loss /= T::lit(rows as f64);
        let rg = self.rg(p);
        let targets = targets.data().to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::NormalizedNll { p, targets }, rg))
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T], &Tensor<T>)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g, &self.nodes[v.0].value);
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier backward calls
    /// on this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::dim("backward", "loss must be a single value"));
        }
        if !self.value(loss).all_finite() {
            return Err(NumericsError::NonFinite("loss".into()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(&op, &gout);
            self.nodes[i].op = op;
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<T>, gout: &[T]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let ga = self.grad_buf(*a).unwrap();
                    gemm(m, n, k, gout, false, &bv, true, ga, true);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data().to_vec();
                    let gb = self.grad_buf(*b).unwrap();
                    gemm(k, m, n, &av, true, gout, false, gb, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d_in) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let d_out = self.value(*w).shape()[1];
                if self.rg(*x) {
                    // Disjoint borrows: the weight lives in another node.
                    let (xi, wi) = (x.0, w.0);
                    let wv = std::mem::take(&mut self.nodes[wi].value);
                    let gx = self.grads[xi].get_or_insert_with(|| vec![T::zero(); n * d_in]);
                    gemm(n, d_out, d_in, gout, false, wv.data(), true, gx, true);
                    self.nodes[wi].value = wv;
                }
                if self.rg(*w) {
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    let gw = self.grad_buf(*w).unwrap();
                    gemm(d_in, n, d_out, xv.data(), true, gout, false, gw, true);
                    self.nodes[x.0].value = xv;
                }
                if let Some(b) = b {
                    self.acc(*b, |gb, _| {
                        for row in gout.chunks(d_out) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, |g, _| add_into(g, gout));
                self.acc(*b, |g, _| add_into(g, gout));
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                self.acc(*a, |g, _| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                self.acc(*b, |g, _| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, |g, _| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * s;
                    }
                });
            }
            Op::Sum(a) => {
                let d = gout[0];
                self.acc(*a, |g, _| g.iter_mut().for_each(|x| *x += d));
            }
            Op::GatherRows { table, offsets, indices } => {
                self.acc(*table, |g, t| {
                    let width = t.cols();
                    for r in 0..offsets.len() - 1 {
                        let src = &gout[r * width..(r + 1) * width];
                        for &i in &indices[offsets[r]..offsets[r + 1]] {
                            add_into(&mut g[i * width..(i + 1) * width], src);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(p, |g, _| add_into(g, &gout[start..start + len]));
                    start += len;
                }
            }
            Op::Reshape(x) => self.acc(*x, |g, _| add_into(g, gout)),
            Op::LayerNorm { x, gain, bias, normalized, rstd } => {
                let width = self.value(*x).cols();
                let gv = self.value(*gain).data().to_vec();
                self.acc(*gain, |g, _| {
                    for (dy, xh) in gout.chunks(width).zip(normalized.chunks(width)) {
                        for i in 0..width {
                            g[i] += dy[i] * xh[i];
                        }
                    }
                });
                self.acc(*bias, |g, _| {
                    for dy in gout.chunks(width) {
                        add_into(g, dy);
                    }
                });
                self.acc(*x, |g, _| {
                    let inv_n = T::one() / T::lit(width as f64);
                    let mut dxh = vec![T::zero(); width];
                    for (r, (dy, xh)) in gout.chunks(width).zip(normalized.chunks(width)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for i in 0..width {
                            dxh[i] = dy[i] * gv[i];
                            mean_d += dxh[i];
                            mean_dx += dxh[i] * xh[i];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        let gr = &mut g[r * width..(r + 1) * width];
                        for i in 0..width {
                            gr[i] += rstd[r] * (dxh[i] - mean_d - xh[i] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                self.acc(*x, |g, xv| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * ops::gelu_derivative(xv.data()[i]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(*x, |g, _| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * mask[i];
                    }
                });
            }
            Op::Attention { q, k, v, heads, layout, probs } => {
                let width = self.value(*q).cols();
                let qv = self.value(*q).data().to_vec();
                let kv = self.value(*k).data().to_vec();
                let vv = self.value(*v).data().to_vec();
                let mut dv = self.rg(*v).then(|| vec![T::zero(); vv.len()]);
                let d_probs = attention::output_backward(probs, &vv, gout, width, *heads, layout, dv.as_deref_mut());
                let mut dq = self.rg(*q).then(|| vec![T::zero(); qv.len()]);
                let mut dk = self.rg(*k).then(|| vec![T::zero(); kv.len()]);
                attention::probs_backward(&qv, &kv, probs, &d_probs, width, *heads, layout, dq.as_deref_mut(), dk.as_deref_mut());
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        self.acc(var, |g, _| add_into(g, &d));
                    }
                }
            }
            Op::AttentionMean { q, k, heads, layout, probs } => {
                let width = self.value(*q).cols();
                let qv = self.value(*q).data().to_vec();
                let kv = self.value(*k).data().to_vec();
                let d_probs = attention::head_mean_backward(gout, *heads, layout);
                let mut dq = self.rg(*q).then(|| vec![T::zero(); qv.len()]);
                let mut dk = self.rg(*k).then(|| vec![T::zero(); kv.len()]);
                attention::probs_backward(&qv, &kv, probs, &d_probs, width, *heads, layout, dq.as_deref_mut(), dk.as_deref_mut());
                for (var, d) in [(*q, dq), (*k, dk)] {
                    if let Some(d) = d {
                        self.acc(var, |g, _| add_into(g, &d));
                    }
                }
            }
            Op::GatherElems { x, indices } => {
                self.acc(*x, |g, _| {
                    for (o, idx) in indices.iter().enumerate() {
                        if let Some(i) = *idx {
                            g[i] += gout[o];
                        }
                    }
                });
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let classes = self.value(*logits).cols();
                let rows = self.value(*logits).rows();
                let scale = gout[0] / T::lit(rows as f64);
                self.acc(*logits, |g, _| {
                    for r in 0..rows {
                        let t = &targets[r * classes..(r + 1) * classes];
                        let mass: T = t.iter().copied().sum();
                        for c in 0..classes {
                            g[r * classes + c] += scale * (probs[r * classes + c] * mass - t[c]);
                        }
                    }
                });
            }
            Op::NormalizedNll { p, targets } => {
                let classes = self.value(*p).cols();
                let rows = self.value(*p).rows();
                let scale = gout[0] / T::lit(rows as f64);
                let tiny = T::min_positive_value();
                self.acc(*p, |g, pv| {
                    for r in 0..rows {
                        let pr = pv.row(r);
                        let t = &targets[r * classes..(r + 1) * classes];
                        let s: T = pr.iter().copied().sum::<T>().max(tiny);
                        let mass: T = t.iter().copied().sum();
                        for c in 0..classes {
                            let own = if t[c] != T::zero() { t[c] / pr[c].max(tiny) } else { T::zero() };
                            g[r * classes + c] -= scale * (own - mass / s);
                        }
                    }
                });
            }
        }
    }

    /// Adds the gradient of every parameter leaf into the store's grad
    /// buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.grads[v.0].as_deref() {
                add_into(store.tensor_mut(id).grad_mut(), g);
            }
        }
    }
}
