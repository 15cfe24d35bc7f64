//! f64 dense ops with hand-written backward passes.

use crate::numerics::{NormKind, TensorF32, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    /// Vectors become a single row.
    pub fn from_tensor(t: &TensorF32) -> Self {
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("unsupported rank {}", s.len()),
        };
        Self::from_vec(rows, cols, t.data().iter().map(|&x| x as f64).collect())
    }

    pub fn to_tensor(&self, shape: &[usize]) -> TensorF32 {
        TensorF32::new(shape.to_vec(), self.data.iter().map(|&x| x as f32).collect())
            .expect("shape matches")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// First `n` rows.
    pub fn head_rows(&self, n: usize) -> Mat {
        Mat::from_vec(n, self.cols, self.data[..n * self.cols].to_vec())
    }

    pub fn add_assign(&mut self, o: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    /// Add `o` into the first `o.rows` rows.
    pub fn add_rows(&mut self, o: &Mat) {
        let n = o.data.len();
        for (a, b) in self.data[..n].iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// `a [m,k] · b [k,n]`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `acc += aᵀ · b` with `a [m,k]`, `b [m,n]`.
pub fn add_at_b(acc: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.rows, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!((acc.rows, acc.cols), (k, n));
    for i in 0..m {
        let brow = &b.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in acc.data[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a [m,n] · bᵀ` with `b [k,n]`.
pub fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let (m, n, k) = (a.rows, a.cols, b.rows);
    let mut out = Mat::zeros(m, k);
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        for j in 0..k {
            out.data[i * k + j] = dot(arow, &b.data[j * n..(j + 1) * n]);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise normalization with its saved statistics.
pub struct NormCache {
    kind: NormKind,
    /// Normalized input before the gain (`x̂`).
    xhat: Mat,
    inv: Vec<f64>,
}

pub fn norm_forward(kind: NormKind, x: &Mat, gain: &[f64]) -> (Mat, NormCache) {
    norm_forward_eps(kind, x, gain, NORM_EPS as f64)
}

pub fn norm_forward_eps(kind: NormKind, x: &Mat, gain: &[f64], eps: f64) -> (Mat, NormCache) {
    let n = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let (mean, var) = match kind {
            NormKind::Rms => (0.0, xr.iter().map(|v| v * v).sum::<f64>() / n),
            NormKind::LayerNorm => {
                let m = xr.iter().sum::<f64>() / n;
                (m, xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            }
        };
        let iv = 1.0 / (var + eps).sqrt();
        inv.push(iv);
        for c in 0..x.cols {
            let h = (xr[c] - mean) * iv;
            xhat.data[r * x.cols + c] = h;
            y.data[r * x.cols + c] = h * gain[c];
        }
    }
    (y, NormCache { kind, xhat, inv })
}

/// Returns `dx`; accumulates the gain gradient into `dgain` when given.
pub fn norm_backward(cache: &NormCache, gain: &[f64], dy: &Mat, dgain: Option<&mut [f64]>) -> Mat {
    let (rows, cols) = (dy.rows, dy.cols);
    let n = cols as f64;
    let mut dx = Mat::zeros(rows, cols);
    if let Some(dg) = dgain {
        for r in 0..rows {
            for c in 0..cols {
                dg[c] += dy.data[r * cols + c] * cache.xhat.data[r * cols + c];
            }
        }
    }
    for r in 0..rows {
        let xh = cache.xhat.row(r);
        let a: Vec<f64> = dy.row(r).iter().zip(gain).map(|(d, g)| d * g).collect();
        let a_xh = dot(&a, xh) / n;
        let out = dx.row_mut(r);
        match cache.kind {
            NormKind::Rms => {
                for c in 0..cols {
                    out[c] = cache.inv[r] * (a[c] - xh[c] * a_xh);
                }
            }
            NormKind::LayerNorm => {
                let a_mean = a.iter().sum::<f64>() / n;
                for c in 0..cols {
                    out[c] = cache.inv[r] * (a[c] - a_mean - xh[c] * a_xh);
                }
            }
        }
    }
    dx
}

/// Gated MLP `(silu(x Wg) ⊙ x Wu) Wd` with saved activations.
pub struct MlpCache {
    x: Mat,
    gate: Mat,
    up: Mat,
    act: Mat,
}

pub fn mlp_forward(x: &Mat, w_gate: &Mat, w_up: &Mat, w_down: &Mat) -> (Mat, MlpCache) {
    let gate = matmul(x, w_gate);
    let up = matmul(x, w_up);
    let act = Mat::from_vec(
        gate.rows,
        gate.cols,
        gate.data.iter().zip(&up.data).map(|(&g, &u)| silu(g) * u).collect(),
    );
    let out = matmul(&act, w_down);
    (
        out,
        MlpCache {
            x: x.clone(),
            gate,
            up,
            act,
        },
    )
}

/// Returns `dx`; accumulates weight gradients.
pub fn mlp_backward(
    c: &MlpCache,
    w_gate: &Mat,
    w_up: &Mat,
    w_down: &Mat,
    dy: &Mat,
    grads: (&mut Mat, &mut Mat, &mut Mat),
) -> Mat {
    let (dg_w, du_w, dd_w) = grads;
    add_at_b(dd_w, &c.act, dy);
    let dact = matmul_bt(dy, w_down);
    let mut dgate = Mat::zeros(c.gate.rows, c.gate.cols);
    let mut dup = Mat::zeros(c.up.rows, c.up.cols);
    for i in 0..dact.data.len() {
        let (g, u, da) = (c.gate.data[i], c.up.data[i], dact.data[i]);
        dgate.data[i] = da * u * silu_grad(g);
        dup.data[i] = da * silu(g);
    }
    add_at_b(dg_w, &c.x, &dgate);
    add_at_b(du_w, &c.x, &dup);
    let mut dx = matmul_bt(&dgate, w_gate);
    dx.add_assign(&matmul_bt(&dup, w_up));
    dx
}

/// Mean cross-entropy over rows, scaled by `weight`. Returns
/// `(loss, dlogits)`; the loss is unscaled, the gradient is scaled.
pub fn cross_entropy(logits: &Mat, targets: &[u32], weight: f64) -> (f64, Mat) {
    let n = logits.rows;
    let mut d = Mat::zeros(n, logits.cols);
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let t = targets[r] as usize;
        loss += lse - row[t];
        let dr = d.row_mut(r);
        for (c, v) in row.iter().enumerate() {
            dr[c] = (v - lse).exp() * weight / n as f64;
        }
        dr[t] -= weight / n as f64;
    }
    (loss / n as f64, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn numeric_grad(f: &dyn Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let mut g = Mat::zeros(x.rows, x.cols);
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += 1e-6;
            let mut m = x.clone();
            m.data[i] -= 1e-6;
            g.data[i] = (f(&p) - f(&m)) / 2e-6;
        }
        g
    }

    fn close(a: &Mat, b: &Mat) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1e-3), "{x} vs {y}");
        }
    }

    #[test]
    fn norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [NormKind::Rms, NormKind::LayerNorm] {
            let x = rand_mat(&mut rng, 3, 5);
            let gain: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..1.5)).collect();
            let w = rand_mat(&mut rng, 3, 5);
            let f = |x: &Mat| dot(&norm_forward(kind, x, &gain).0.data, &w.data);
            let (_, cache) = norm_forward(kind, &x, &gain);
            let mut dg = vec![0.0; 5];
            let dx = norm_backward(&cache, &gain, &w, Some(&mut dg));
            close(&dx, &numeric_grad(&f, &x));
            let fg = |g: &Mat| dot(&norm_forward(kind, &x, &g.data).0.data, &w.data);
            close(&Mat::from_vec(1, 5, dg), &numeric_grad(&fg, &Mat::from_vec(1, 5, gain.clone())));
        }
    }

    #[test]
    fn mlp_and_cross_entropy_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 2, 4);
        let (wg, wu, wd) = (rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 3, 6));
        let targets = [1u32, 5];
        let f = |x: &Mat| cross_entropy(&mlp_forward(x, &wg, &wu, &wd).0, &targets, 0.7).0 * 0.7;
        let (y, cache) = mlp_forward(&x, &wg, &wu, &wd);
        let (_, dy) = cross_entropy(&y, &targets, 0.7);
        let (mut a, mut b, mut c) = (Mat::zeros(4, 3), Mat::zeros(4, 3), Mat::zeros(3, 6));
        let dx = mlp_backward(&cache, &wg, &wu, &wd, &dy, (&mut a, &mut b, &mut c));
        close(&dx, &numeric_grad(&f, &x));
        let fd = |w: &Mat| cross_entropy(&mlp_forward(&x, &wg, &wu, w).0, &targets, 0.7).0 * 0.7;
        close(&c, &numeric_grad(&fd, &wd));
        let fgate = |w: &Mat| cross_entropy(&mlp_forward(&x, w, &wu, &wd).0, &targets, 0.7).0 * 0.7;
        close(&a, &numeric_grad(&fgate, &wg));
    }
}
