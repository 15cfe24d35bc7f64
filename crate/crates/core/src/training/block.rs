//! Transformer block over a whole causal sequence, forward and backward (f64).

use super::ops::{
    add_at_b, matmul, matmul_bt, mlp_backward, mlp_forward, norm_backward, norm_forward, Mat,
    MlpCache, NormCache,
};
use super::params::ParamSet;
use crate::model::{rope_angle, BlockWeights, ModelConfig, Sublayers};
use crate::numerics::NormKind;

/// Block tensors in [`BlockWeights::NAMES`] order.
pub struct BlockRef<'a> {
    pub attn_norm: &'a Mat,
    pub wq: &'a Mat,
    pub wk: &'a Mat,
    pub wv: &'a Mat,
    pub wo: &'a Mat,
    pub mlp_norm: &'a Mat,
    pub w_gate: &'a Mat,
    pub w_up: &'a Mat,
    pub w_down: &'a Mat,
}

impl<'a> BlockRef<'a> {
    pub fn from_params(p: &'a ParamSet, prefix: &str) -> Self {
        let g = |n: &str| &p[format!("{prefix}{n}").as_str()];
        Self {
            attn_norm: g("attn_norm"),
            wq: g("wq"),
            wk: g("wk"),
            wv: g("wv"),
            wo: g("wo"),
            mlp_norm: g("mlp_norm"),
            w_gate: g("w_gate"),
            w_up: g("w_up"),
            w_down: g("w_down"),
        }
    }
}

/// Gradients in [`BlockWeights::NAMES`] order.
pub struct BlockGrads(pub [Mat; 9]);

impl BlockGrads {
    fn zeros(w: &BlockRef<'_>) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        Self([
            z(w.attn_norm),
            z(w.wq),
            z(w.wk),
            z(w.wv),
            z(w.wo),
            z(w.mlp_norm),
            z(w.w_gate),
            z(w.w_up),
            z(w.w_down),
        ])
    }

    pub fn add_into(&self, grads: &mut ParamSet, prefix: &str) {
        for (name, g) in BlockWeights::NAMES.iter().zip(&self.0) {
            grads[format!("{prefix}{name}").as_str()].add_assign(g);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub n_heads: usize,
    pub d_head: usize,
    pub norm_kind: NormKind,
}

impl From<&ModelConfig> for BlockShape {
    fn from(c: &ModelConfig) -> Self {
        Self {
            n_heads: c.n_heads,
            d_head: c.d_head,
            norm_kind: c.norm_kind,
        }
    }
}

struct AttnCache {
    norm: NormCache,
    n1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per head, row-major `[T, T]` attention probabilities (zero above the diagonal).
    probs: Vec<Vec<f64>>,
    att: Mat,
}

pub struct BlockCache {
    shape: BlockShape,
    sub: Sublayers,
    attn: Option<AttnCache>,
    mlp: Option<(NormCache, MlpCache)>,
}

fn rope_rows(x: &mut Mat, shape: &BlockShape, inverse: bool) {
    let half = shape.d_head / 2;
    for pos in 0..x.rows {
        let row = x.row_mut(pos);
        for i in 0..half {
            let a = rope_angle(pos, i, shape.d_head);
            let (s, c) = a.sin_cos();
            let s = if inverse { -s } else { s };
            for h in 0..shape.n_heads {
                let base = h * shape.d_head + 2 * i;
                let (x0, x1) = (row[base], row[base + 1]);
                row[base] = x0 * c - x1 * s;
                row[base + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Causal block forward over positions `0..x.rows`.
pub fn block_forward(w: &BlockRef<'_>, shape: BlockShape, sub: Sublayers, x: &Mat) -> (Mat, BlockCache) {
    let (t, d) = (x.rows, x.cols);
    let mut y = x.clone();
    let attn = sub.attention.then(|| {
        let (n1, norm) = norm_forward(shape.norm_kind, &y, &w.attn_norm.data);
        let mut q = matmul(&n1, w.wq);
        let mut k = matmul(&n1, w.wk);
        let v = matmul(&n1, w.wv);
        rope_rows(&mut q, &shape, false);
        rope_rows(&mut k, &shape, false);
        let dh = shape.d_head;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut att = Mat::zeros(t, d);
        let mut probs = Vec::with_capacity(shape.n_heads);
        for h in 0..shape.n_heads {
            let lo = h * dh;
            let mut p = vec![0.0f64; t * t];
            for i in 0..t {
                let qi = &q.row(i)[lo..lo + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = super::ops::dot(qi, &k.row(j)[lo..lo + dh]) * scale;
                    p[i * t + j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (p[i * t + j] - max).exp();
                    p[i * t + j] = e;
                    sum += e;
                }
                let out = &mut att.data[i * d + lo..i * d + lo + dh];
                for j in 0..=i {
                    p[i * t + j] /= sum;
                    let pj = p[i * t + j];
                    for (o, &vv) in out.iter_mut().zip(&v.row(j)[lo..lo + dh]) {
                        *o += pj * vv;
                    }
                }
            }
            probs.push(p);
        }
        y.add_assign(&matmul(&att, w.wo));
        AttnCache {
            norm,
            n1,
            q,
            k,
            v,
            probs,
            att,
        }
    });
    let mlp = sub.mlp.then(|| {
        let (n2, norm) = norm_forward(shape.norm_kind, &y, &w.mlp_norm.data);
        let (m, cache) = mlp_forward(&n2, w.w_gate, w.w_up, w.w_down);
        y.add_assign(&m);
        (norm, cache)
    });
    (
        y,
        BlockCache {
            shape,
            sub,
            attn,
            mlp,
        },
    )
}

/// Returns `(dx, weight gradients)`.
pub fn block_backward(w: &BlockRef<'_>, cache: &BlockCache, dy: &Mat) -> (Mat, BlockGrads) {
    let mut g = BlockGrads::zeros(w);
    let shape = cache.shape;
    let mut dx = dy.clone();
    if let Some((norm, mc)) = &cache.mlp {
        let [_, _, _, _, _, g_mn, g_gate, g_up, g_down] = &mut g.0;
        let dn2 = mlp_backward(mc, w.w_gate, w.w_up, w.w_down, dy, (g_gate, g_up, g_down));
        dx.add_assign(&norm_backward(norm, &w.mlp_norm.data, &dn2, Some(&mut g_mn.data)));
    }
    if let Some(ac) = &cache.attn {
        let (t, d) = (dx.rows, dx.cols);
        let dh = shape.d_head;
        let scale = 1.0 / (dh as f64).sqrt();
        add_at_b(&mut g.0[4], &ac.att, &dx);
        let datt = matmul_bt(&dx, w.wo);
        let mut dq = Mat::zeros(t, d);
        let mut dk = Mat::zeros(t, d);
        let mut dv = Mat::zeros(t, d);
        let mut dp = vec![0.0f64; t];
        for h in 0..shape.n_heads {
            let lo = h * dh;
            let p = &ac.probs[h];
            for i in 0..t {
                let da = &datt.row(i)[lo..lo + dh];
                let mut sum = 0.0;
                for j in 0..=i {
                    dp[j] = super::ops::dot(da, &ac.v.row(j)[lo..lo + dh]);
                    sum += p[i * t + j] * dp[j];
                    let pij = p[i * t + j];
                    for (o, &a) in dv.data[j * d + lo..j * d + lo + dh].iter_mut().zip(da) {
                        *o += pij * a;
                    }
                }
                for j in 0..=i {
                    let ds = p[i * t + j] * (dp[j] - sum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq.data[i * d + lo + c] += ds * ac.k.data[j * d + lo + c];
                        dk.data[j * d + lo + c] += ds * ac.q.data[i * d + lo + c];
                    }
                }
            }
        }
        rope_rows(&mut dq, &shape, true);
        rope_rows(&mut dk, &shape, true);
        add_at_b(&mut g.0[1], &ac.n1, &dq);
        add_at_b(&mut g.0[2], &ac.n1, &dk);
        add_at_b(&mut g.0[3], &ac.n1, &dv);
        let mut dn1 = matmul_bt(&dq, w.wq);
        dn1.add_assign(&matmul_bt(&dk, w.wk));
        dn1.add_assign(&matmul_bt(&dv, w.wv));
        let dres = norm_backward(&ac.norm, &w.attn_norm.data, &dn1, Some(&mut g.0[0].data));
        dx.add_assign(&dres);
    }
    let _ = cache.sub;
    (dx, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TargetModel;
    use crate::numerics::TensorF32;

    #[test]
    fn matches_f32_inference_block() {
        let cfg = ModelConfig::new(1, 8, 2, 16, 10, 16).with_seed(3);
        let m = TargetModel::random_with_std(cfg.clone(), 0.4).unwrap();
        let p = ParamSet::from_named(m.named_tensors());
        let w = BlockRef::from_params(&p, "blocks.0.");
        let x: Vec<f32> = (0..40).map(|i| ((i * 7) % 11) as f32 * 0.1 - 0.5).collect();
        for sub in [Sublayers::FULL, Sublayers { attention: true, mlp: false }, Sublayers { attention: false, mlp: true }] {
            let (y, _) = block_forward(&w, (&cfg).into(), sub, &Mat::from_vec(5, 8, x.iter().map(|&v| v as f64).collect()));
            let mut xt = TensorF32::matrix(5, 8, x.clone()).unwrap();
            let layout = crate::model::StageLayout::from_parents(0, &[None, Some(0), Some(1), Some(2), Some(3)]).unwrap();
            let mut kv = crate::model::LayerKv::default();
            crate::model::block_forward(&m.blocks()[0], &cfg, m.rope(), &mut xt, &layout, &mut kv, sub).unwrap();
            for (a, b) in y.data.iter().zip(xt.data()) {
                assert!((a - *b as f64).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = ModelConfig::new(1, 8, 2, 12, 10, 16).with_seed(5);
        let m = TargetModel::random_with_std(cfg.clone(), 0.5).unwrap();
        let mut p = ParamSet::from_named(m.named_tensors());
        let x = Mat::from_vec(4, 8, (0..32).map(|i| ((i * 5) % 13) as f64 * 0.15 - 0.9).collect());
        let probe = Mat::from_vec(4, 8, (0..32).map(|i| ((i * 3) % 7) as f64 * 0.2 - 0.6).collect());
        for sub in [Sublayers::FULL, Sublayers { attention: true, mlp: false }, Sublayers { attention: false, mlp: true }] {
            let loss = |p: &ParamSet, x: &Mat| {
                let (y, _) = block_forward(&BlockRef::from_params(p, "blocks.0."), (&cfg).into(), sub, x);
                super::super::ops::dot(&y.data, &probe.data)
            };
            let (_, cache) = block_forward(&BlockRef::from_params(&p, "blocks.0."), (&cfg).into(), sub, &x);
            let (dx, g) = block_backward(&BlockRef::from_params(&p, "blocks.0."), &cache, &probe);
            let h = 1e-6;
            for i in 0..x.data.len() {
                let (mut a, mut b) = (x.clone(), x.clone());
                a.data[i] += h;
                b.data[i] -= h;
                let num = (loss(&p, &a) - loss(&p, &b)) / (2.0 * h);
                assert!((num - dx.data[i]).abs() < 1e-6 * num.abs().max(1.0), "dx[{i}] {num} vs {}", dx.data[i]);
            }
            for (k, name) in BlockWeights::NAMES.iter().enumerate() {
                let full = format!("blocks.0.{name}");
                for i in (0..p[full.as_str()].data.len()).step_by(3) {
                    let orig = p[full.as_str()].data[i];
                    p[full.as_str()].data[i] = orig + h;
                    let lp = loss(&p, &x);
                    p[full.as_str()].data[i] = orig - h;
                    let lm = loss(&p, &x);
                    p[full.as_str()].data[i] = orig;
                    let num = (lp - lm) / (2.0 * h);
                    let ana = g.0[k].data[i];
                    assert!((num - ana).abs() < 1e-6 * num.abs().max(1.0), "{name}[{i}] {num} vs {ana}");
                }
            }
        }
    }
}
