//! Tape-based reverse-mode differentiation over 2-D row-major values.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters enter as
//! borrowed leaves so building a graph never copies the model. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for every
//! node that depends on a differentiable leaf.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{
    attention_rows, check_ce_args, logsumexp, matmul, matmul_tn_acc, rmsnorm_rows, rope_rows,
    silu, silu_grad, transpose, AttnRow, Mask, Real, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    Scale(Var, Real),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<Real>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
        theta: Real,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        saved: Vec<AttnRow>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    Concat(Var, Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<Real>,
        probs: Vec<Real>,
    },
}

struct Node<'p> {
    value: Cow<'p, [Real]>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path connects `v` to the loss.
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v` with unreached nodes reported as zeros.
    pub fn dense(&self, v: Var) -> Vec<Real> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [Real]>, rows: usize, cols: usize, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Borrowed differentiable leaf. 1-D tensors become a single row.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.rows(), t.cols(), true, Op::Leaf)
    }

    /// Borrowed leaf that never receives gradients.
    pub fn constant(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.rows(), t.cols(), false, Op::Leaf)
    }

    /// Owned leaf; `requires_grad` decides whether gradients flow to it.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<Real>, requires_grad: bool) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!("leaf {rows}x{cols} with {} values", data.len())));
        }
        Ok(self.push(Cow::Owned(data), rows, cols, requires_grad, Op::Leaf))
    }

    pub fn tensor(&mut self, t: &Tensor) -> Var {
        self.push(
            Cow::Owned(t.data().to_vec()),
            t.rows(),
            t.cols(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    pub fn value(&self, v: Var) -> &[Real] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (n, k), (k2, m)));
        }
        let out = matmul(self.value(a), self.value(b), n, k, m);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), n, m, ng, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<Real> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), r, c, ng, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<Real> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.shape(a);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), r, c, ng, Op::Mul(a, b)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out: Vec<Real> = self.value(a).iter().map(|&x| silu(x)).collect();
        let (r, c) = self.shape(a);
        let ng = self.needs(a);
        self.push(Cow::Owned(out), r, c, ng, Op::Silu(a))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Var {
        let out: Vec<Real> = self.value(a).iter().map(|&x| x * s).collect();
        let (r, c) = self.shape(a);
        let ng = self.needs(a);
        self.push(Cow::Owned(out), r, c, ng, Op::Scale(a, s))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.nodes[gain.0].value.len() != c {
            return Err(Error::Shape(format!("rmsnorm gain for width {c}")));
        }
        let (out, inv) = rmsnorm_rows(self.value(x), self.value(gain), c);
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(Cow::Owned(out), r, c, ng, Op::RmsNorm { x, gain, inv }))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, theta: Real) -> Result<Var> {
        let (r, c) = self.shape(x);
        if positions.len() != r || head_dim == 0 || !head_dim.is_multiple_of(2) || c % head_dim != 0 {
            return Err(Error::Shape(format!(
                "rope over {r}x{c} with {} positions, head dim {head_dim}",
                positions.len()
            )));
        }
        let mut out = self.value(x).to_vec();
        rope_rows(&mut out, positions, c, head_dim, theta, false);
        let ng = self.needs(x);
        Ok(self.push(
            Cow::Owned(out),
            r,
            c,
            ng,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
                theta,
            },
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &Mask) -> Result<Var> {
        let (n, d) = self.shape(q);
        if self.shape(k).1 != d || self.shape(v) != self.shape(k) || heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let (out, saved) = attention_rows(self.value(q), self.value(k), self.value(v), d, heads, mask, ng)?;
        Ok(self.push(
            Cow::Owned(out),
            n,
            d,
            ng,
            Op::Attention { q, k, v, heads, saved },
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::TargetOutOfRange {
                    position,
                    target: id,
                    vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Cow::Owned(out),
            ids.len(),
            d,
            ng,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean of each `(start, len)` run of rows.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > r {
                return Err(Error::Segmentation(format!(
                    "segment {start}+{len} outside {r} rows"
                )));
            }
            let o = &mut out[s * c..(s + 1) * c];
            for i in start..start + len {
                for (a, &b) in o.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                    *a += b;
                }
            }
            let inv = 1.0 / len as Real;
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Cow::Owned(out),
            segments.len(),
            c,
            ng,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
        ))
    }

    /// Stacks the rows of `b` under the rows of `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, c) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if c != cb {
            return Err(shape_err("concat", (ra, c), (rb, cb)));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), ra + rb, c, ng, Op::Concat(a, b)))
    }

    /// Rows `x[idx[0]], x[idx[1]], ...`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Shape(format!("row {i} of {r}")));
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Cow::Owned(out),
            idx.len(),
            c,
            ng,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(shape_err("reshape", (r, c), (rows, cols)));
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(out), rows, cols, ng, Op::Reshape(x)))
    }

    /// Weighted negative log-likelihood as a 1x1 node. Zero-weight rows are
    /// skipped in both directions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[Real]) -> Result<Var> {
        let (n, v) = self.shape(logits);
        check_ce_args(n, v, targets, weights)?;
        let lv = self.value(logits);
        let ng = self.needs(logits);
        let mut total = 0.0;
        let mut probs = Vec::new();
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let lse = logsumexp(row);
            total += weights[i] * (lse - row[targets[i]]);
            if ng {
                probs.extend(row.iter().map(|&x| (x - lse).exp()));
            }
        }
        Ok(self.push(
            Cow::Owned(vec![total]),
            1,
            1,
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let lv = self.value(loss)[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                value: lv as f64,
                context: format!("loss node {} of {}", loss.0, self.nodes.len()),
            });
        }
        let mut grads: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn accumulate<'a>(&self, grads: &'a mut [Option<Vec<Real>>], v: Var) -> Option<&'a mut Vec<Real>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node<'p>, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                if self.needs(*a) {
                    let bt = transpose(self.value(*b), k, m);
                    let da = matmul(g, &bt, n, m, k);
                    let acc = self.accumulate(grads, *a).unwrap();
                    acc.iter_mut().zip(da).for_each(|(x, y)| *x += y);
                }
                if let Some(acc) = self.accumulate(grads, *b) {
                    matmul_tn_acc(self.value(*a), g, n, k, m, acc);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(acc) = self.accumulate(grads, *v) {
                        acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(acc) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        acc[i] += g[i] * bv[i];
                    }
                }
                if let Some(acc) = self.accumulate(grads, *b) {
                    for i in 0..g.len() {
                        acc[i] += g[i] * av[i];
                    }
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                if let Some(acc) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        acc[i] += g[i] * silu_grad(av[i]);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(acc) = self.accumulate(grads, *a) {
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let d = node.cols;
                let xv = self.value(*x);
                let gv = self.value(*gain);
                if self.needs(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (i, &r) in inv.iter().enumerate() {
                        let xr = &xv[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        // y = x r γ, r = (mean(x²)+ε)^(-1/2)
                        let dot: Real = (0..d).map(|j| gr[j] * gv[j] * xr[j]).sum();
                        let coef = r * r * r * dot / d as Real;
                        for j in 0..d {
                            dx[i * d + j] = gr[j] * gv[j] * r - coef * xr[j];
                        }
                    }
                    let acc = self.accumulate(grads, *x).unwrap();
                    acc.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
                }
                if let Some(acc) = self.accumulate(grads, *gain) {
                    for (i, &r) in inv.iter().enumerate() {
                        for j in 0..d {
                            acc[j] += g[i * d + j] * xv[i * d + j] * r;
                        }
                    }
                }
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                theta,
            } => {
                let mut dx = g.to_vec();
                rope_rows(&mut dx, positions, node.cols, *head_dim, *theta, true);
                if let Some(acc) = self.accumulate(grads, *x) {
                    acc.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
                }
            }
            Op::Attention { q, k, v, heads, saved } => {
                self.attention_backward(node, g, grads, (*q, *k, *v), *heads, saved);
            }
            Op::Embedding { table, ids } => {
                let d = node.cols;
                if let Some(acc) = self.accumulate(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            acc[id * d + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let c = node.cols;
                if let Some(acc) = self.accumulate(grads, *x) {
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = 1.0 / len as Real;
                        for i in start..start + len {
                            for j in 0..c {
                                acc[i * c + j] += g[s * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let split = self.nodes[a.0].value.len();
                if let Some(acc) = self.accumulate(grads, *a) {
                    acc.iter_mut().zip(&g[..split]).for_each(|(x, y)| *x += y);
                }
                if let Some(acc) = self.accumulate(grads, *b) {
                    acc.iter_mut().zip(&g[split..]).for_each(|(x, y)| *x += y);
                }
            }
            Op::Gather { x, idx } => {
                let c = node.cols;
                if let Some(acc) = self.accumulate(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            acc[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(acc) = self.accumulate(grads, *x) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.shape(*logits).1;
                if let Some(acc) = self.accumulate(grads, *logits) {
                    let mut p = probs.chunks(v);
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let pr = p.next().expect("saved probabilities per weighted row");
                        let scale = g[0] * w;
                        let row = &mut acc[i * v..(i + 1) * v];
                        for j in 0..v {
                            row[j] += scale * pr[j];
                        }
                        row[t] -= scale;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node<'p>,
        g: &[Real],
        grads: &mut [Option<Vec<Real>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        saved: &[AttnRow],
    ) {
        let d = node.cols;
        let hd = d / heads;
        let scale = 1.0 / (hd as Real).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = Vec::new();
        for (i, row) in saved.iter().enumerate() {
            let nc = row.cols.len();
            for h in 0..heads {
                let probs = &row.probs[h * nc..(h + 1) * nc];
                let go = &g[i * d + h * hd..i * d + (h + 1) * hd];
                dp.clear();
                let mut dot = 0.0;
                for (&j, &p) in row.cols.iter().zip(probs) {
                    let vh = &vv[j * d + h * hd..j * d + (h + 1) * hd];
                    let s: Real = go.iter().zip(vh).map(|(a, b)| a * b).sum();
                    dp.push(s);
                    dot += p * s;
                    let dvh = &mut dv[j * d + h * hd..j * d + (h + 1) * hd];
                    for (a, &b) in dvh.iter_mut().zip(go) {
                        *a += p * b;
                    }
                }
                let qh = &qv[i * d + h * hd..i * d + (h + 1) * hd];
                for ((&j, &p), &s) in row.cols.iter().zip(probs).zip(&dp) {
                    let ds = p * (s - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kh = &kv[j * d + h * hd..j * d + (h + 1) * hd];
                    let dqh = &mut dq[i * d + h * hd..i * d + (h + 1) * hd];
                    for (a, &b) in dqh.iter_mut().zip(kh) {
                        *a += ds * b;
                    }
                    let dkh = &mut dk[j * d + h * hd..j * d + (h + 1) * hd];
                    for (a, &b) in dkh.iter_mut().zip(qh) {
                        *a += ds * b;
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(acc) = self.accumulate(grads, var) {
                acc.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel_err(a: Real, n: Real) -> Real {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric(x: &[Real], f: &dyn Fn(&[Real]) -> Real) -> Vec<Real> {
        let h = 1e-5;
        let mut work = x.to_vec();
        (0..x.len())
            .map(|i| {
                work[i] = x[i] + h;
                let up = f(&work);
                work[i] = x[i] - h;
                let down = f(&work);
                work[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn pseudo(n: usize, seed: u64) -> Vec<Real> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as Real / (1u64 << 53) as Real) * 2.0 - 1.0
            })
            .collect()
    }

    /// Checks d(loss)/d(input) for a graph built by `build` from one leaf.
    fn check(rows: usize, cols: usize, seed: u64, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let x = pseudo(rows * cols, seed);
        let eval = |data: &[Real]| {
            let mut g = Graph::new();
            let v = g.leaf(rows, cols, data.to_vec(), true).unwrap();
            let out = build(&mut g, v);
            g.value(out)[0]
        };
        let mut g = Graph::new();
        let v = g.leaf(rows, cols, x.clone(), true).unwrap();
        let out = build(&mut g, v);
        let analytic = g.backward(out).unwrap().dense(v);
        let num = numeric(&x, &eval);
        for (a, n) in analytic.iter().zip(&num) {
            assert!(rel_err(*a, *n) < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    /// Reduces any node to a scalar through a fixed random projection so every
    /// output entry influences the loss.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let (r, c) = g.shape(v);
        let w = g.leaf(r, c, pseudo(r * c, seed), false).unwrap();
        let p = g.mul(v, w).unwrap();
        let flat = g.reshape(p, 1, r * c).unwrap();
        let ones = g.leaf(r * c, 1, vec![1.0; r * c], false).unwrap();
        g.matmul(flat, ones).unwrap()
    }

    #[test]
    fn matmul_grad() {
        check(3, 4, 1, &|g, x| {
            let w = g.leaf(4, 2, pseudo(8, 9), false).unwrap();
            let y = g.matmul(x, w).unwrap();
            project(g, y, 3)
        });
        check(4, 2, 2, &|g, x| {
            let a = g.leaf(3, 4, pseudo(12, 5), false).unwrap();
            let y = g.matmul(a, x).unwrap();
            project(g, y, 4)
        });
    }

    #[test]
    fn rmsnorm_grad() {
        check(3, 5, 7, &|g, x| {
            let gain = g.leaf(1, 5, pseudo(5, 8), false).unwrap();
            let y = g.rmsnorm(x, gain).unwrap();
            project(g, y, 6)
        });
        check(1, 5, 7, &|g, gain| {
            let x = g.leaf(3, 5, pseudo(15, 8), false).unwrap();
            let y = g.rmsnorm(x, gain).unwrap();
            project(g, y, 6)
        });
    }

    #[test]
    fn swiglu_grad() {
        check(2, 4, 11, &|g, x| {
            let wg = g.leaf(4, 6, pseudo(24, 1), false).unwrap();
            let wu = g.leaf(4, 6, pseudo(24, 2), false).unwrap();
            let wd = g.leaf(6, 4, pseudo(24, 3), false).unwrap();
            let a = g.matmul(x, wg).unwrap();
            let a = g.silu(a);
            let b = g.matmul(x, wu).unwrap();
            let h = g.mul(a, b).unwrap();
            let y = g.matmul(h, wd).unwrap();
            project(g, y, 12)
        });
    }

    #[test]
    fn rope_grad() {
        check(3, 8, 13, &|g, x| {
            let y = g.rope(x, &[0, 4, 9], 4, 10.0).unwrap();
            project(g, y, 14)
        });
    }

    #[test]
    fn attention_grad_through_q_k_v() {
        let mask = Mask::from_fn(3, 4, |i, j| j <= i + 1);
        for which in 0..3 {
            check(if which == 0 { 3 } else { 4 }, 4, 20 + which, &|g, x| {
                let q = g.leaf(3, 4, pseudo(12, 31), false).unwrap();
                let k = g.leaf(4, 4, pseudo(16, 32), false).unwrap();
                let v = g.leaf(4, 4, pseudo(16, 33), false).unwrap();
                let (q, k, v) = match which {
                    0 => (x, k, v),
                    1 => (q, x, v),
                    _ => (q, k, x),
                };
                let y = g.attention(q, k, v, 2, &mask).unwrap();
                project(g, y, 34)
            });
        }
    }

    #[test]
    fn cross_entropy_grad_and_zero_weight_rows() {
        let weights = [1.0, 0.0, 2.5];
        check(3, 5, 40, &|g, x| g.cross_entropy(x, &[1, 2, 4], &weights).unwrap());
        let mut g = Graph::new();
        let x = g.leaf(3, 5, pseudo(15, 41), true).unwrap();
        let l = g.cross_entropy(x, &[1, 2, 4], &weights).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.dense(x)[5..10].iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let x = g.leaf(3, 5, pseudo(15, 41), true).unwrap();
        let l = g.cross_entropy(x, &[1, 2, 4], &[0.0; 3]).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
        assert!(g.backward(l).unwrap().dense(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_concat_segment_grads() {
        check(4, 3, 50, &|g, x| {
            let a = g.gather_rows(x, &[3, 0, 0, 2]).unwrap();
            let b = g.segment_mean(x, &[(0, 1), (1, 3)]).unwrap();
            let c = g.concat_rows(a, b).unwrap();
            project(g, c, 51)
        });
    }

    #[test]
    fn embedding_grad_scatters() {
        let table = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut g = Graph::new();
        let t = g.param(&table);
        let e = g.embedding(t, &[2, 0, 2]).unwrap();
        let loss = project(&mut g, e, 60);
        let grads = g.backward(loss).unwrap();
        let w = pseudo(6, 60);
        let expected = [w[2], w[3], 0.0, 0.0, w[0] + w[4], w[1] + w[5]];
        assert_eq!(grads.dense(t), expected);
    }

    #[test]
    fn unrelated_parameter_has_zero_gradient() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let va = g.param(&a);
        let vb = g.param(&b);
        let loss = project(&mut g, va, 1);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(vb).is_none());
        assert_eq!(grads.dense(vb), vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(1, 1, vec![Real::NAN], true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let x = pseudo(6, 70);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let v = g.leaf(2, 3, x.clone(), true).unwrap();
            let s = g.silu(v);
            let l1 = project(&mut g, s, 71);
            let l2 = project(&mut g, v, 72);
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(loss).unwrap().dense(v)
        };
        let (a, b, s) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            assert!((a[i] + b[i] - s[i]).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn attention_ignores_inadmissible_values(seed in 0u64..1000, row in 0usize..4, col in 0usize..5) {
            let mask = Mask::from_fn(4, 5, |i, j| (i + j) % 3 != 1 || j == i);
            let q = pseudo(16, seed);
            let k = pseudo(20, seed + 1);
            let v = pseudo(20, seed + 2);
            let run = |k: &[Real], v: &[Real]| {
                let mut g = Graph::new();
                let q = g.leaf(4, 4, q.clone(), false).unwrap();
                let k = g.leaf(5, 4, k.to_vec(), false).unwrap();
                let v = g.leaf(5, 4, v.to_vec(), false).unwrap();
                let o = g.attention(q, k, v, 2, &mask).unwrap();
                g.value(o)[row * 4..(row + 1) * 4].to_vec()
            };
            let base = run(&k, &v);
            let mut k2 = k.clone();
            let mut v2 = v.clone();
            if !mask.admits(row, col) {
                for j in 0..4 {
                    k2[col * 4 + j] += 3.7;
                    v2[col * 4 + j] -= 1.9;
                }
            }
            prop_assert_eq!(base, run(&k2, &v2));
        }

        #[test]
        fn rmsnorm_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
            let x = pseudo(8, seed);
            let gain = Tensor::new(vec![8], vec![1.0; 8]).unwrap();
            let a = crate::tensor::rmsnorm(&Tensor::matrix(1, 8, x.clone()).unwrap(), &gain).unwrap();
            let scaled: Vec<Real> = x.iter().map(|v| v * c as Real).collect();
            let b = crate::tensor::rmsnorm(&Tensor::matrix(1, 8, scaled).unwrap(), &gain).unwrap();
            let ms: Real = x.iter().map(|v| v * v).sum::<Real>() / 8.0;
            // epsilon effects are bounded by eps / min(ms, c² ms)
            let tol = 1e-6 / (ms * (c as Real).powi(2).min(1.0)) + 1e-12;
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() <= tol * p.abs().max(1.0));
            }
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let run = || {
                let mut g = Graph::new();
                let q = g.leaf(3, 4, pseudo(12, seed), true).unwrap();
                let o = g.attention(q, q, q, 2, &Mask::causal(3)).unwrap();
                let l = g.cross_entropy(o, &[0, 1, 3], &[1.0, 1.0, 1.0]).unwrap();
                let gr = g.backward(l).unwrap().dense(q);
                (g.value(l).to_vec(), gr)
            };
            prop_assert_eq!(run(), run());
        }
    }
}
