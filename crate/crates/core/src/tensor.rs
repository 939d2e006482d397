//! Dense row-major f32 matrices and the multi-head self-attention forward pass.
//!
//! Two attention paths share everything after the attention probabilities are
//! known: [`attention_full`] computes Q, K, the scaled logits and the softmax,
//! while [`attention_memoized`] starts from externally supplied probability
//! matrices and only projects V. Because both finish through the same
//! value-mixing and output-projection code, feeding the full path's own APMs to
//! the memoized path reproduces its output bit for bit.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Mean over rows, producing one value per column.
    pub fn mean_rows(&self) -> Vec<f32> {
        let mut acc = vec![0.0f32; self.cols];
        for r in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
        if self.rows > 0 {
            let inv = 1.0 / self.rows as f32;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        acc
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Standard matrix product `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            axpy(out_row, aik, b.row(k));
        }
    }
    Ok(out)
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Per-row standardization to zero mean and unit variance.
pub fn layer_norm_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let n = m.cols as f32;
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// An L×L row-stochastic attention probability matrix for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct Apm {
    probs: Matrix,
}

impl Apm {
    /// Wraps a square matrix, checking that every row is a distribution.
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.rows != probs.cols {
            return Err(Error::shape(format!(
                "APM must be square, got {:?}",
                probs.shape()
            )));
        }
        let apm = Self { probs };
        apm.validate(1e-4)?;
        Ok(apm)
    }

    /// Builds an APM from `seq_len²` row-major probabilities.
    pub fn from_vec(seq_len: usize, probs: Vec<f32>) -> Result<Self> {
        Self::new(Matrix::from_vec(seq_len, seq_len, probs)?)
    }

    /// Every entry equal to 1/L.
    pub fn uniform(seq_len: usize) -> Self {
        let p = 1.0 / seq_len as f32;
        Self {
            probs: Matrix {
                rows: seq_len,
                cols: seq_len,
                data: vec![p; seq_len * seq_len],
            },
        }
    }

    pub(crate) fn from_softmax(probs: Matrix) -> Self {
        Self { probs }
    }

    pub fn seq_len(&self) -> usize {
        self.probs.rows
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn view(&self) -> ApmRef<'_> {
        ApmRef {
            seq_len: self.probs.rows,
            probs: &self.probs.data,
        }
    }

    pub fn validate(&self, tol: f32) -> Result<()> {
        self.view().validate(tol)
    }
}

/// Borrowed APM, e.g. a head slice inside a mapped batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApmRef<'a> {
    seq_len: usize,
    probs: &'a [f32],
}

impl<'a> ApmRef<'a> {
    pub fn new(seq_len: usize, probs: &'a [f32]) -> Result<Self> {
        if probs.len() != seq_len * seq_len {
            return Err(Error::shape(format!(
                "{} values for a {seq_len}x{seq_len} APM",
                probs.len()
            )));
        }
        Ok(Self { seq_len, probs })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn probs(&self) -> &'a [f32] {
        self.probs
    }

    pub fn row(&self, p: usize) -> &'a [f32] {
        &self.probs[p * self.seq_len..(p + 1) * self.seq_len]
    }

    pub fn to_owned(&self) -> Apm {
        Apm {
            probs: Matrix {
                rows: self.seq_len,
                cols: self.seq_len,
                data: self.probs.to_vec(),
            },
        }
    }

    pub fn validate(&self, tol: f32) -> Result<()> {
        for p in 0..self.seq_len {
            let row = self.row(p);
            if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::NotDistribution(format!("row {p} has entry {bad}")));
            }
            let sum: f32 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::NotDistribution(format!("row {p} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Weights of one transformer layer. Q/K/V/out projections are H×H with no
/// bias; the feed-forward block is H→F→H with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_out: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vec<f32>,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vec<f32>,
    num_heads: usize,
}

impl LayerWeights {
    pub fn new(
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        w_out: Matrix,
        ffn_w1: Matrix,
        ffn_b1: Vec<f32>,
        ffn_w2: Matrix,
        ffn_b2: Vec<f32>,
        num_heads: usize,
    ) -> Result<Self> {
        let h = w_q.rows;
        if num_heads == 0 || !h.is_multiple_of(num_heads) {
            return Err(Error::invalid(format!(
                "hidden size {h} not divisible by {num_heads} heads"
            )));
        }
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_out", &w_out)] {
            if m.shape() != (h, h) {
                return Err(Error::shape(format!("{name} is {:?}, expected {h}x{h}", m.shape())));
            }
        }
        let f = ffn_w1.cols;
        if ffn_w1.rows != h || ffn_w2.shape() != (f, h) || ffn_b1.len() != f || ffn_b2.len() != h {
            return Err(Error::shape("feed-forward weights do not chain H→F→H"));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_out,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            num_heads,
        })
    }

    /// Seeded random layer. `attn_gain` scales the Q/K projections and thereby
    /// the sharpness of the attention distributions.
    pub fn random<R: Rng + ?Sized>(
        hidden: usize,
        ffn_dim: usize,
        num_heads: usize,
        attn_gain: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let s = 1.0 / (hidden as f32).sqrt();
        let w_q = Matrix::random_normal(hidden, hidden, s * attn_gain, rng);
        let w_k = Matrix::random_normal(hidden, hidden, s * attn_gain, rng);
        let w_v = Matrix::random_normal(hidden, hidden, s, rng);
        let w_out = Matrix::random_normal(hidden, hidden, s, rng);
        let ffn_w1 = Matrix::random_normal(hidden, ffn_dim, s, rng);
        let ffn_w2 = Matrix::random_normal(ffn_dim, hidden, 1.0 / (ffn_dim as f32).sqrt(), rng);
        let ffn_b1 = Matrix::random_normal(1, ffn_dim, 0.1, rng).into_vec();
        let ffn_b2 = Matrix::random_normal(1, hidden, 0.1, rng).into_vec();
        Self::new(w_q, w_k, w_v, w_out, ffn_w1, ffn_b1, ffn_w2, ffn_b2, num_heads)
    }

    pub fn hidden(&self) -> usize {
        self.w_q.rows
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.hidden() / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_w1.cols
    }
}

fn check_hidden(hidden: &Matrix, w: &LayerWeights) -> Result<()> {
    if hidden.cols != w.hidden() {
        return Err(Error::shape(format!(
            "hidden state has {} columns, layer expects {}",
            hidden.cols,
            w.hidden()
        )));
    }
    if hidden.rows == 0 {
        return Err(Error::shape("empty hidden state"));
    }
    Ok(())
}

/// Full multi-head attention. Returns the projected output (L×H) and one APM
/// per head.
pub fn attention_full(hidden: &Matrix, w: &LayerWeights) -> Result<(Matrix, Vec<Apm>)> {
    check_hidden(hidden, w)?;
    let q = matmul(hidden, &w.w_q)?;
    let k = matmul(hidden, &w.w_k)?;
    let v = matmul(hidden, &w.w_v)?;
    let (l, hd) = (hidden.rows, w.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();

    let mut apms = Vec::with_capacity(w.num_heads);
    for h in 0..w.num_heads {
        let cols = h * hd..(h + 1) * hd;
        let mut logits = Matrix::zeros(l, l);
        for i in 0..l {
            let qi = &q.row(i)[cols.clone()];
            let out = logits.row_mut(i);
            for (j, o) in out.iter_mut().enumerate() {
                *o = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
        }
        apms.push(Apm::from_softmax(softmax_rows(&logits)));
    }
    let views: Vec<ApmRef<'_>> = apms.iter().map(Apm::view).collect();
    let out = mix_and_project(&views, &v, w)?;
    Ok((out, apms))
}

/// Attention with precomputed probabilities: only V is projected.
pub fn attention_memoized(hidden: &Matrix, w: &LayerWeights, apms: &[ApmRef<'_>]) -> Result<Matrix> {
    check_hidden(hidden, w)?;
    if apms.len() != w.num_heads {
        return Err(Error::shape(format!(
            "{} APMs for {} heads",
            apms.len(),
            w.num_heads
        )));
    }
    if let Some(bad) = apms.iter().find(|a| a.seq_len != hidden.rows) {
        return Err(Error::shape(format!(
            "APM for L={} used with L={}",
            bad.seq_len, hidden.rows
        )));
    }
    let v = matmul(hidden, &w.w_v)?;
    mix_and_project(apms, &v, w)
}

/// concat_h(APM_h · V_h) · W_out
fn mix_and_project(apms: &[ApmRef<'_>], v: &Matrix, w: &LayerWeights) -> Result<Matrix> {
    let (l, hd) = (v.rows, w.head_dim());
    let mut ctx = Matrix::zeros(l, v.cols);
    for (h, apm) in apms.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..l {
            let probs = apm.row(i);
            let out = &mut ctx.data[i * v.cols..(i + 1) * v.cols][cols.clone()];
            for (j, &p) in probs.iter().enumerate() {
                axpy(out, p, &v.row(j)[cols.clone()]);
            }
        }
    }
    matmul(&ctx, &w.w_out)
}

/// `x + relu(x·W1 + b1)·W2 + b2`
pub fn feed_forward(hidden: &Matrix, w: &LayerWeights) -> Result<Matrix> {
    check_hidden(hidden, w)?;
    let mut inner = matmul(hidden, &w.ffn_w1)?;
    for r in 0..inner.rows {
        for (v, b) in inner.row_mut(r).iter_mut().zip(&w.ffn_b1) {
            *v = (*v + b).max(0.0);
        }
    }
    let mut out = matmul(&inner, &w.ffn_w2)?;
    for r in 0..out.rows {
        for ((o, b), x) in out.row_mut(r).iter_mut().zip(&w.ffn_b2).zip(hidden.row(r)) {
            *o += b + x;
        }
    }
    Ok(out)
}
