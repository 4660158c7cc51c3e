//! Dense row-major tensors and the forward kernels shared by training and inference.
//!
//! Every kernel here is row-local: output row `i` is computed from input row `i`
//! (and, for attention, the admissible key rows) with an accumulation order that
//! does not depend on how many other rows are in the batch. Incremental decoding
//! relies on this to reproduce full recomputation bit-for-bit.

use crate::error::{Error, Result};

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub const RMS_EPS: Real = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Real {
        self.data[0]
    }
}

/// Per-pair admissibility for attention: `admits(i, j)` is true when query `i`
/// may attend key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Mask { rows, cols, bits }
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn admits(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `a[n,k] · b[k,m]`. Each output element accumulates over `k` in ascending order.
pub(crate) fn matmul(a: &[Real], b: &[Real], n: usize, k: usize, m: usize) -> Vec<Real> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Accumulates `aᵀ[k,n] · c[n,m]` into `out[k,m]`.
pub(crate) fn matmul_tn_acc(a: &[Real], c: &[Real], n: usize, k: usize, m: usize, out: &mut [Real]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * m..(kk + 1) * m];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

pub(crate) fn silu(x: Real) -> Real {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: Real) -> Real {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise RMSNorm; returns the normalized rows and each row's inverse RMS.
pub(crate) fn rmsnorm_rows(x: &[Real], gain: &[Real], d: usize) -> (Vec<Real>, Vec<Real>) {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<Real>() / d as Real;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        for j in 0..d {
            out[i * d + j] = row[j] * r * gain[j];
        }
    }
    (out, inv)
}

fn rope_angle(position: usize, pair: usize, head_dim: usize, theta: Real) -> Real {
    let freq = theta.powf(-(2.0 * pair as Real) / head_dim as Real);
    position as Real * freq
}

/// Rotates consecutive feature pairs `(2p, 2p+1)` inside each head by
/// `position · theta^(-2p/head_dim)`. `inverse` applies the transpose rotation.
pub(crate) fn rope_rows(
    x: &mut [Real],
    positions: &[usize],
    d: usize,
    head_dim: usize,
    theta: Real,
    inverse: bool,
) {
    let half = head_dim / 2;
    for (i, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let row = &mut x[i * d..(i + 1) * d];
        for p in 0..half {
            let a = rope_angle(pos, p, head_dim, theta);
            let (s, c) = a.sin_cos();
            let s = if inverse { -s } else { s };
            for h in 0..d / head_dim {
                let base = h * head_dim + 2 * p;
                let (x0, x1) = (row[base], row[base + 1]);
                row[base] = x0 * c - x1 * s;
                row[base + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Attention probabilities kept for the backward pass: admissible key indices
/// and, per head, the softmax weights over them.
pub(crate) struct AttnRow {
    pub cols: Vec<usize>,
    pub probs: Vec<Real>,
}

/// Multi-head scaled dot-product attention restricted to admissible pairs.
/// Inadmissible keys are skipped entirely, which is the same as an additive
/// negative infinity followed by renormalization over the remaining keys.
pub(crate) fn attention_rows(
    q: &[Real],
    k: &[Real],
    v: &[Real],
    d: usize,
    heads: usize,
    mask: &Mask,
    keep: bool,
) -> Result<(Vec<Real>, Vec<AttnRow>)> {
    let n = q.len() / d;
    let m = k.len() / d;
    if mask.rows() != n || mask.cols() != m {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match {} queries x {} keys",
            mask.rows(),
            mask.cols(),
            n,
            m
        )));
    }
    let hd = d / heads;
    let scale = 1.0 / (hd as Real).sqrt();
    let mut out = vec![0.0; n * d];
    let mut saved = Vec::new();
    let mut cols = Vec::new();
    let mut scores = Vec::new();
    for i in 0..n {
        cols.clear();
        cols.extend(
            mask.row(i)
                .iter()
                .enumerate()
                .filter(|(_, &ok)| ok)
                .map(|(j, _)| j),
        );
        if cols.is_empty() {
            return Err(Error::EmptyMaskRow { row: i });
        }
        let mut probs = if keep {
            Vec::with_capacity(heads * cols.len())
        } else {
            Vec::new()
        };
        for h in 0..heads {
            let qh = &q[i * d + h * hd..i * d + (h + 1) * hd];
            scores.clear();
            let mut max = Real::NEG_INFINITY;
            for &j in &cols {
                let kh = &k[j * d + h * hd..j * d + (h + 1) * hd];
                let s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<Real>() * scale;
                if s > max {
                    max = s;
                }
                scores.push(s);
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let orow = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
            for (&j, s) in cols.iter().zip(scores.iter_mut()) {
                *s /= z;
                let vh = &v[j * d + h * hd..j * d + (h + 1) * hd];
                for (o, &vv) in orow.iter_mut().zip(vh) {
                    *o += *s * vv;
                }
            }
            if keep {
                probs.extend_from_slice(&scores);
            }
        }
        if keep {
            saved.push(AttnRow {
                cols: cols.clone(),
                probs,
            });
        }
    }
    Ok((out, saved))
}

/// Numerically stable log-sum-exp of one row.
pub(crate) fn logsumexp(row: &[Real]) -> Real {
    let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<Real>().ln()
}

/// Softmax of one row.
pub fn softmax(row: &[Real]) -> Vec<Real> {
    let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut out: Vec<Real> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: Real = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

fn check_2d(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{name} must be 2-D, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Masked multi-head attention over `queries[n,d]`, `keys[m,d]`, `values[m,d]`.
pub fn masked_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    heads: usize,
    mask: &Mask,
) -> Result<Tensor> {
    let (n, d) = check_2d(queries, "queries")?;
    let (m, dk) = check_2d(keys, "keys")?;
    if d == 0 || heads == 0 || d % heads != 0 || dk != d || values.shape() != keys.shape() {
        return Err(Error::Shape(format!(
            "attention dims q {:?} k {:?} v {:?} heads {}",
            queries.shape(),
            keys.shape(),
            values.shape(),
            heads
        )));
    }
    let (out, _) = attention_rows(queries.data(), keys.data(), values.data(), d, heads, mask, false)?;
    let _ = m;
    Tensor::matrix(n, d, out)
}

/// Applies rotary position encoding to each row of `states` using its own
/// position index. Positions need not be contiguous.
pub fn rope_apply(states: &Tensor, positions: &[usize], theta: Real, head_dim: usize) -> Result<Tensor> {
    let (n, d) = check_2d(states, "states")?;
    if positions.len() != n {
        return Err(Error::Shape(format!("{} positions for {} rows", positions.len(), n)));
    }
    if theta <= 0.0 {
        return Err(Error::InvalidArgument(format!("rope theta must be positive, got {theta}")));
    }
    if head_dim == 0 || !head_dim.is_multiple_of(2) || d % head_dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "head dim {head_dim} must be even and divide width {d}"
        )));
    }
    let mut data = states.data().to_vec();
    rope_rows(&mut data, positions, d, head_dim, theta, false);
    Tensor::matrix(n, d, data)
}

pub fn rmsnorm(states: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let d = states.cols();
    if gain.numel() != d {
        return Err(Error::Shape(format!("gain has {} values for width {}", gain.numel(), d)));
    }
    let (out, _) = rmsnorm_rows(states.data(), gain.data(), d);
    Tensor::new(states.shape().to_vec(), out)
}

/// Gated feed-forward weights: `down(silu(x·gate) ⊙ (x·up))`.
pub struct SwigluWeights<'a> {
    pub gate: &'a Tensor,
    pub up: &'a Tensor,
    pub down: &'a Tensor,
}

pub fn swiglu_ffn(states: &Tensor, w: &SwigluWeights<'_>) -> Result<Tensor> {
    let (n, d) = check_2d(states, "states")?;
    let (gd, hidden) = check_2d(w.gate, "gate")?;
    if gd != d || w.up.shape() != w.gate.shape() || w.down.shape() != [hidden, d] {
        return Err(Error::Shape("swiglu parameter dimensions".into()));
    }
    let g = matmul(states.data(), w.gate.data(), n, d, hidden);
    let u = matmul(states.data(), w.up.data(), n, d, hidden);
    let h: Vec<Real> = g.iter().zip(&u).map(|(&a, &b)| silu(a) * b).collect();
    Tensor::matrix(n, d, matmul(&h, w.down.data(), n, hidden, d))
}

/// Weighted negative log-likelihood `Σ_i w_i · (logsumexp(l_i) − l_i[t_i])`.
/// Rows with zero weight are skipped.
pub fn cross_entropy_from_logits(logits: &Tensor, targets: &[usize], weights: &[Real]) -> Result<Real> {
    let (n, v) = check_2d(logits, "logits")?;
    check_ce_args(n, v, targets, weights)?;
    let mut total = 0.0;
    for i in 0..n {
        if weights[i] == 0.0 {
            continue;
        }
        let row = logits.row(i);
        total += weights[i] * (logsumexp(row) - row[targets[i]]);
    }
    Ok(total)
}

pub(crate) fn check_ce_args(n: usize, v: usize, targets: &[usize], weights: &[Real]) -> Result<()> {
    if targets.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "{} targets / {} weights for {} rows",
            targets.len(),
            weights.len(),
            n
        )));
    }
    if let Some((position, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= v) {
        return Err(Error::TargetOutOfRange {
            position,
            target,
            vocab: v,
        });
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative loss weight {w}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(rows: usize, cols: usize, data: &[Real]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::zeros(vec![2, 3]).numel(), 6);
    }

    #[test]
    fn singleton_softmax_returns_value_row() {
        let q = t(1, 2, &[0.3, -1.2]);
        let k = t(1, 2, &[5.0, 4.0]);
        let v = t(1, 2, &[7.0, -3.0]);
        let out = masked_attention(&q, &k, &v, 1, &Mask::full(1, 1)).unwrap();
        assert_eq!(out.data(), &[7.0, -3.0]);
    }

    #[test]
    fn two_by_two_matches_hand_softmax() {
        // d_k = 1: weights are softmax(q·k_j).
        let q = t(2, 1, &[1.0, -0.5]);
        let k = t(2, 1, &[2.0, 0.5]);
        let v = t(2, 1, &[3.0, -1.0]);
        let out = masked_attention(&q, &k, &v, 1, &Mask::full(2, 2)).unwrap();
        for (i, qi) in [1.0, -0.5].iter().enumerate() {
            let s0: Real = qi * 2.0;
            let s1: Real = qi * 0.5;
            let w0 = s0.exp() / (s0.exp() + s1.exp());
            let expected = w0 * 3.0 + (1.0 - w0) * -1.0;
            assert_relative_eq!(out.data()[i], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn causal_row_ignores_later_keys() {
        let q = t(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let k = t(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let v = t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mask = Mask::causal(3);
        let a = masked_attention(&q, &k, &v, 1, &mask).unwrap();
        let k2 = t(3, 2, &[1.0, 0.0, 9.0, -9.0, 4.0, 4.0]);
        let v2 = t(3, 2, &[1.0, 2.0, -3.0, 8.0, 0.5, 0.5]);
        let b = masked_attention(&q, &k2, &v2, 1, &mask).unwrap();
        assert_eq!(a.row(0), b.row(0));
    }

    #[test]
    fn empty_mask_row_is_an_error() {
        let q = t(2, 2, &[1.0; 4]);
        let mut mask = Mask::full(2, 2);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        match masked_attention(&q, &q, &q, 1, &mask) {
            Err(Error::EmptyMaskRow { row: 1 }) => {}
            other => panic!("expected empty-row error, got {other:?}"),
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = t(1, 4, &[0.5, -1.0, 2.0, 3.0]);
        let y = rope_apply(&x, &[0], 500000.0, 4).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rope_matches_complex_rotation() {
        let theta: Real = 500000.0;
        let x = t(1, 4, &[0.5, -1.0, 2.0, 3.0]);
        let y = rope_apply(&x, &[1], theta, 4).unwrap();
        // pair p rotates by angle 1 · theta^(-2p/4), as multiplication by e^{iφ}
        for p in 0..2 {
            let phi = theta.powf(-(2.0 * p as Real) / 4.0);
            let (re, im) = (x.data()[2 * p], x.data()[2 * p + 1]);
            let (c, s) = (phi.cos(), phi.sin());
            assert_relative_eq!(y.data()[2 * p], re * c - im * s, max_relative = 1e-12);
            assert_relative_eq!(y.data()[2 * p + 1], re * s + im * c, max_relative = 1e-12);
        }
    }

    #[test]
    fn rope_is_per_position() {
        let full: Vec<Real> = (0..32).map(|i| (i as Real * 0.37).sin()).collect();
        let x = t(8, 4, &full);
        let all = rope_apply(&x, &(0..8).collect::<Vec<_>>(), 500000.0, 2).unwrap();
        let tail = t(3, 4, &full[20..32]);
        let part = rope_apply(&tail, &[5, 6, 7], 500000.0, 2).unwrap();
        assert_eq!(&all.data()[20..32], part.data());
    }

    #[test]
    fn rope_rejects_bad_arguments() {
        let x = t(1, 4, &[1.0; 4]);
        assert!(rope_apply(&x, &[0], 0.0, 4).is_err());
        assert!(rope_apply(&x, &[0, 1], 10.0, 4).is_err());
        assert!(rope_apply(&x, &[0], 10.0, 3).is_err());
    }

    #[test]
    fn rmsnorm_basics() {
        let ones = t(1, 4, &[1.0; 4]);
        let gain = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let y = rmsnorm(&ones, &gain).unwrap();
        for &v in y.data() {
            assert_relative_eq!(v, 1.0 / (1.0 + RMS_EPS).sqrt(), max_relative = 1e-15);
        }
        let row = [0.3, -1.7, 2.2, 0.05];
        let x = t(1, 4, &row);
        let g = Tensor::new(vec![4], vec![1.5, 0.5, -1.0, 2.0]).unwrap();
        let y = rmsnorm(&x, &g).unwrap();
        let rms = (row.iter().map(|v| v * v).sum::<Real>() / 4.0 + 1e-6).sqrt();
        for j in 0..4 {
            assert_relative_eq!(y.data()[j], row[j] / rms * g.data()[j], max_relative = 1e-12);
        }
    }

    #[test]
    fn swiglu_scalar_case() {
        let one = t(1, 1, &[1.0]);
        let w = SwigluWeights {
            gate: &one,
            up: &one,
            down: &one,
        };
        let zero = swiglu_ffn(&t(1, 1, &[0.0]), &w).unwrap();
        assert_eq!(zero.data(), &[0.0]);
        for x in [-2.0, -0.3, 0.7, 3.1] {
            let y = swiglu_ffn(&t(1, 1, &[x]), &w).unwrap();
            let expected = x * (x / (1.0 + (-x as Real).exp()));
            assert_relative_eq!(y.data()[0], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_zero_weight() {
        let v = 7;
        let logits = t(3, v, &[0.25; 21]);
        let loss = cross_entropy_from_logits(&logits, &[0, 3, 6], &[1.0; 3]).unwrap();
        assert_relative_eq!(loss, 3.0 * (v as Real).ln(), max_relative = 1e-12);
        let none = cross_entropy_from_logits(&logits, &[0, 3, 6], &[0.0; 3]).unwrap();
        assert_eq!(none, 0.0);
        assert!(matches!(
            cross_entropy_from_logits(&logits, &[0, 7, 1], &[1.0; 3]),
            Err(Error::TargetOutOfRange { target: 7, .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_logsumexp_formula() {
        let data: Vec<Real> = (0..10).map(|i| ((i * 7 % 5) as Real) * 0.3 - 0.5).collect();
        let logits = t(2, 5, &data);
        let loss = cross_entropy_from_logits(&logits, &[1, 4], &[0.5, 2.0]).unwrap();
        let mut expected = 0.0;
        for (i, (&tgt, w)) in [1usize, 4].iter().zip([0.5, 2.0]).enumerate() {
            let row = &data[i * 5..(i + 1) * 5];
            let z: Real = row.iter().map(|x| x.exp()).sum();
            expected += w * -(row[tgt].exp() / z).ln();
        }
        assert_relative_eq!(loss, expected, max_relative = 1e-12);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        let mut acc = vec![0.0; 6];
        matmul_tn_acc(&a, &[1.0, 1.0, 1.0, 1.0], 2, 3, 2, &mut acc);
        assert_eq!(acc, vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }
}
