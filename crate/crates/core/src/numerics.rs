//! Dense f32 kernels shared by the target model, the speculator heads and the
//! decode engine.
//!
//! Every reduction runs in a fixed loop order so identical inputs give
//! bit-identical outputs, and a row's result never depends on which other
//! rows are in the batch. The tree-verification path relies on the latter.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with mean zero.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension for matrices, 1 for vectors.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View as a 2-D matrix with the given row count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("rank {}", self.shape.len())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn add(&self, other: &TensorF32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        finite("add", Self::new(self.shape.clone(), data)?)
    }
}

fn finite(op: &'static str, t: TensorF32) -> Result<TensorF32> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Boolean attention mask: `allowed(i, j)` means query row `i` may attend to key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("mask", format!("{rows}x{cols} vs {}", allowed.len())));
        }
        for r in 0..rows {
            if !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a) {
                return Err(Error::FullyMaskedRow { row: r });
            }
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self::new(rows, cols, allowed)
    }

    /// Lower-triangular mask, `allowed(i, j) == (j <= i)`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i).expect("causal mask always has a diagonal")
    }

    pub fn full(rows: usize, cols: usize) -> Result<Self> {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

/// `[m,k] x [k,n] -> [m,n]`, accumulating over `k` in ascending order.
pub fn matmul(a: &TensorF32, b: &TensorF32) -> Result<TensorF32> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * n];
    matmul_into(&a.data, &b.data, m, k, n, &mut out);
    finite("matmul", TensorF32::new(vec![m, n], out)?)
}

/// Raw kernel behind [`matmul`]; `out` must be zeroed.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &TensorF32) -> Result<TensorF32> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows(input)" });
    }
    let cols = x.cols();
    if cols == 0 {
        return Err(Error::shape("softmax_rows", "empty rows"));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        softmax_in_place(out.row_mut(r));
    }
    finite("softmax_rows", out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Natural-log softmax of a single row.
pub fn log_softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The `k` largest entries as `(index, value)`, descending by value, ties by index.
pub fn top_k(row: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| (i, row[i])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Rms,
    LayerNorm,
}

impl std::str::FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rms" => Ok(NormKind::Rms),
            "layernorm" => Ok(NormKind::LayerNorm),
            _ => Err(Error::InvalidConfig(format!("unknown norm kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Rms => "rms",
            NormKind::LayerNorm => "layernorm",
        })
    }
}

pub const NORM_EPS: f32 = 1e-5;

/// `gain * x / sqrt(mean(x^2) + eps)` over a single vector.
pub fn rms_normalize(x: &TensorF32, gain: &TensorF32, eps: f32) -> Result<TensorF32> {
    normalize_rows(NormKind::Rms, x, gain, eps)
}

/// `gain * (x - mean) / sqrt(var + eps)` over a single vector.
pub fn layer_normalize(x: &TensorF32, gain: &TensorF32, eps: f32) -> Result<TensorF32> {
    normalize_rows(NormKind::LayerNorm, x, gain, eps)
}

/// Normalize every row of `x` (a vector counts as one row).
pub fn normalize_rows(kind: NormKind, x: &TensorF32, gain: &TensorF32, eps: f32) -> Result<TensorF32> {
    let n = x.cols();
    if n == 0 || gain.len() != n {
        return Err(Error::shape(
            "normalize",
            format!("x {:?}, gain {:?}", x.shape, gain.shape),
        ));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        normalize_slice(kind, x.row(r), &gain.data, eps, out.row_mut(r));
    }
    finite("normalize", out)
}

pub(crate) fn normalize_slice(kind: NormKind, x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let n = x.len() as f32;
    match kind {
        NormKind::Rms => {
            let ms = x.iter().map(|v| v * v).sum::<f32>() / n;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
                *o = g * (v * inv);
            }
        }
        NormKind::LayerNorm => {
            let mean = x.iter().sum::<f32>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
                *o = g * ((v - mean) * inv);
            }
        }
    }
}

/// `softmax(q kᵀ / sqrt(d), masked) v`. Disallowed keys are skipped entirely,
/// so they contribute exactly nothing to either the normalizer or the output.
pub fn masked_attention(
    q: &TensorF32,
    k: &TensorF32,
    v: &TensorF32,
    mask: &AttnMask,
) -> Result<TensorF32> {
    let (m, d) = (q.rows(), q.cols());
    let t = k.rows();
    if k.cols() != d || v.rows() != t || mask.rows != m || mask.cols != t {
        return Err(Error::shape(
            "masked_attention",
            format!(
                "q {:?} k {:?} v {:?} mask {}x{}",
                q.shape, k.shape, v.shape, mask.rows, mask.cols
            ),
        ));
    }
    let dv = v.cols();
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; m * dv];
    let mut scores: Vec<(usize, f32)> = Vec::with_capacity(t);
    for i in 0..m {
        scores.clear();
        let qi = q.row(i);
        for j in 0..t {
            if mask.allowed(i, j) {
                scores.push((j, dot(qi, k.row(j)) * scale));
            }
        }
        if scores.is_empty() {
            return Err(Error::FullyMaskedRow { row: i });
        }
        attend_row(&mut scores, |j| v.row(j), &mut out[i * dv..(i + 1) * dv]);
    }
    finite("masked_attention", TensorF32::new(vec![m, dv], out)?)
}

/// Softmax over the `(key index, score)` list followed by the weighted sum of
/// value rows, in list order. Shared with the model's cached attention path.
pub(crate) fn attend_row<'a>(
    scores: &mut [(usize, f32)],
    value_row: impl Fn(usize) -> &'a [f32],
    out: &mut [f32],
) {
    let max = scores
        .iter()
        .map(|s| s.1)
        .fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        s.1 = (s.1 - max).exp();
        sum += s.1;
    }
    for &(j, e) in scores.iter() {
        let p = e / sum;
        for (o, &vv) in out.iter_mut().zip(value_row(j)) {
            *o += p * vv;
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Gated feed-forward: `(silu(x W_gate) ⊙ (x W_up)) W_down`.
pub fn mlp_forward(
    x: &TensorF32,
    w_up: &TensorF32,
    w_gate: &TensorF32,
    w_down: &TensorF32,
) -> Result<TensorF32> {
    let x2 = if x.shape.len() == 1 {
        x.clone().reshape(vec![1, x.len()])?
    } else {
        x.clone()
    };
    if w_up.shape != w_gate.shape || w_up.shape.len() != 2 || w_down.rows() != w_up.cols() {
        return Err(Error::shape(
            "mlp_forward",
            format!(
                "up {:?} gate {:?} down {:?}",
                w_up.shape, w_gate.shape, w_down.shape
            ),
        ));
    }
    let gate = matmul(&x2, w_gate)?;
    let up = matmul(&x2, w_up)?;
    let hidden: Vec<f32> = gate
        .data
        .iter()
        .zip(&up.data)
        .map(|(&g, &u)| silu(g) * u)
        .collect();
    let hidden = TensorF32::new(gate.shape.clone(), hidden)?;
    let out = matmul(&hidden, w_down)?;
    if x.shape.len() == 1 {
        let n = out.len();
        finite("mlp_forward", out.reshape(vec![n])?)
    } else {
        finite("mlp_forward", out)
    }
}
