//! Teacher-forced forward and backward for the draft heads (f64).
//!
//! For a sequence `s` of length `T` and position `p`, the target's own next
//! token is `s[p+1]`; head `j` (0-based) predicts `s[p+2+j]` and its chain
//! consumes the ground-truth embeddings `e_m = embed(s[p+1+m])` for `m <= j`.
//! Head `j` therefore has `T-2-j` rows.

use super::block::{block_backward, block_forward, BlockCache, BlockRef, BlockShape};
use super::ops::{
    add_at_b, cross_entropy, dot, matmul, matmul_bt, mlp_backward, mlp_forward, norm_backward,
    norm_forward, Mat, MlpCache, NormCache,
};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::numerics::NormKind;
use crate::speculator::{embed_from_lm_head, DecoderKv, Regressive, SpeculatorConfig};

/// A token sequence with the frozen target's last-block hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFeatures {
    pub tokens: Vec<u32>,
    /// `[T, d_model]`, computed with the f32 inference path.
    pub hidden: Mat,
}

pub fn target_features(model: &TargetModel, tokens: &[u32]) -> Result<TargetFeatures> {
    let out = model.prefill_rows(&mut model.new_cache(), tokens)?;
    Ok(TargetFeatures {
        tokens: tokens.to_vec(),
        hidden: Mat::from_tensor(&out.hidden),
    })
}

/// Rows available to head `j` in a sequence of length `t`.
pub fn head_rows(t: usize, j: usize) -> usize {
    t.saturating_sub(2 + j)
}

/// Frozen target-side tensors used by the heads.
pub struct HeadTrainer {
    pub config: SpeculatorConfig,
    shape: BlockShape,
    model_norm: NormKind,
    final_norm: Vec<f64>,
    lm_head: Mat,
    /// `embed_from_lm_head` for every token, `[vocab, d]`.
    embed: Mat,
}

enum StepCache {
    Identity,
    Single,
    Accumulate {
        norm: NormCache,
        nq: Mat,
        q: Mat,
        /// `[rows, j+1]`
        probs: Mat,
    },
    Mlp {
        norm: NormCache,
        mlp: MlpCache,
    },
}

struct HeadCache {
    norm: NormCache,
    mlp: MlpCache,
    final_norm: NormCache,
    nf: Mat,
}

pub struct Forward {
    /// Per-head logits, `[T-2-j, vocab]`.
    pub logits: Vec<Mat>,
    aug: Option<BlockCache>,
    /// `hs[j]` has the rows of step `j`'s input; `hs[j+1]` is head `j`'s input.
    hs: Vec<Mat>,
    es: Vec<Mat>,
    keys: Vec<Mat>,
    values: Vec<Mat>,
    steps: Vec<StepCache>,
    heads: Vec<HeadCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `Σ_j w_j · CE_j`.
    pub total: f64,
    pub per_head: Vec<f64>,
}

impl HeadTrainer {
    pub fn new(model: &TargetModel, config: SpeculatorConfig) -> Result<Self> {
        config.validate()?;
        let v = model.config().vocab_size;
        let d = model.config().d_model;
        let mut embed = Mat::zeros(v, d);
        for t in 0..v {
            let e = embed_from_lm_head(model, t as u32)?;
            for (o, &x) in embed.row_mut(t).iter_mut().zip(e.data()) {
                *o = x as f64;
            }
        }
        Ok(Self {
            config,
            shape: model.config().into(),
            model_norm: model.config().norm_kind,
            final_norm: model.final_norm().data().iter().map(|&x| x as f64).collect(),
            lm_head: Mat::from_tensor(model.lm_head()),
            embed,
        })
    }

    fn embed_rows(&self, tokens: &[u32]) -> Mat {
        let d = self.embed.cols;
        let mut m = Mat::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            m.row_mut(i).copy_from_slice(self.embed.row(t as usize));
        }
        m
    }

    fn lm<'a>(&'a self, p: &'a ParamSet, j: usize) -> &'a Mat {
        p.get(&format!("heads.{j}.lm_head")).unwrap_or(&self.lm_head)
    }

    pub fn forward(&self, p: &ParamSet, f: &TargetFeatures) -> Result<Forward> {
        let t = f.tokens.len();
        if t < 3 {
            return Err(Error::InvalidConfig(format!("training sequences need >= 3 tokens, got {t}")));
        }
        let cfg = &self.config;
        let (h0, aug) = match cfg.augmenting.sublayers() {
            Some(sub) => {
                let (y, c) = block_forward(&BlockRef::from_params(p, "augment."), self.shape, sub, &f.hidden);
                (y, Some(c))
            }
            None => (f.hidden.clone(), None),
        };
        let n_heads = cfg.n_heads;
        let mut hs = vec![h0.head_rows(head_rows(t, 0))];
        let mut es = Vec::with_capacity(n_heads);
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut steps = Vec::with_capacity(n_heads);
        let mut heads = Vec::with_capacity(n_heads);
        let mut logits = Vec::with_capacity(n_heads);
        let scale = 1.0 / (h0.cols as f64).sqrt();
        for j in 0..n_heads {
            let n = head_rows(t, j);
            let prev = hs[j].head_rows(n);
            let e = self.embed_rows(&f.tokens[1 + j..1 + j + n]);
            let (next, step) = match cfg.regressive {
                Regressive::None => (prev, StepCache::Identity),
                Regressive::AttentionDecoder => {
                    let v = matmul(&e, &p["decoder.wv"]);
                    match cfg.decoder_kv {
                        DecoderKv::Single => {
                            let mut h = prev;
                            h.add_assign(&v);
                            values.push(v);
                            (h, StepCache::Single)
                        }
                        DecoderKv::Accumulate => {
                            let (nq, norm) = norm_forward(cfg.norm_kind, &prev, &p["decoder.norm"].data);
                            let q = matmul(&nq, &p["decoder.wq"]);
                            keys.push(matmul(&e, &p["decoder.wk"]));
                            values.push(v);
                            let mut probs = Mat::zeros(n, j + 1);
                            let mut h = prev;
                            for r in 0..n {
                                let pr = probs.row_mut(r);
                                for m in 0..=j {
                                    pr[m] = dot(q.row(r), keys[m].row(r)) * scale;
                                }
                                let max = pr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                                let mut sum = 0.0;
                                for x in pr.iter_mut() {
                                    *x = (*x - max).exp();
                                    sum += *x;
                                }
                                for x in pr.iter_mut() {
                                    *x /= sum;
                                }
                                let hr = h.row_mut(r);
                                for m in 0..=j {
                                    let w = probs.data[r * (j + 1) + m];
                                    for (o, &vv) in hr.iter_mut().zip(values[m].row(r)) {
                                        *o += w * vv;
                                    }
                                }
                            }
                            (h, StepCache::Accumulate { norm, nq, q, probs })
                        }
                    }
                }
                Regressive::Mlp => {
                    let (nh, norm) = norm_forward(cfg.norm_kind, &prev, &p["mlp_regressive.norm"].data);
                    let d = nh.cols;
                    let mut x = Mat::zeros(n, 2 * d);
                    for r in 0..n {
                        x.row_mut(r)[..d].copy_from_slice(nh.row(r));
                        x.row_mut(r)[d..].copy_from_slice(e.row(r));
                    }
                    let (out, mlp) = mlp_forward(
                        &x,
                        &p["mlp_regressive.w_gate"],
                        &p["mlp_regressive.w_up"],
                        &p["mlp_regressive.w_down"],
                    );
                    let mut h = prev;
                    h.add_assign(&out);
                    (h, StepCache::Mlp { norm, mlp })
                }
            };
            // head j
            let pre = format!("heads.{j}.");
            let (nh, norm) = norm_forward(cfg.norm_kind, &next, &p[format!("{pre}norm").as_str()].data);
            let (m, mlp) = mlp_forward(
                &nh,
                &p[format!("{pre}w_gate").as_str()],
                &p[format!("{pre}w_up").as_str()],
                &p[format!("{pre}w_down").as_str()],
            );
            let mut z = next.clone();
            z.add_assign(&m);
            let (nf, final_norm) = norm_forward(self.model_norm, &z, &self.final_norm);
            logits.push(matmul(&nf, self.lm(p, j)));
            heads.push(HeadCache {
                norm,
                mlp,
                final_norm,
                nf,
            });
            es.push(e);
            steps.push(step);
            hs.push(next);
        }
        Ok(Forward {
            logits,
            aug,
            hs,
            es,
            keys,
            values,
            steps,
            heads,
        })
    }

    /// Loss for one sequence; adds its gradient (scaled by `grad_scale`) into `grads`.
    pub fn loss_and_grad(
        &self,
        p: &ParamSet,
        f: &TargetFeatures,
        loss_weights: &[f64],
        grad_scale: f64,
        grads: &mut ParamSet,
    ) -> Result<LossReport> {
        let fw = self.forward(p, f)?;
        let cfg = &self.config;
        let n_heads = cfg.n_heads;
        let t = f.tokens.len();
        let mut per_head = Vec::with_capacity(n_heads);
        let mut total = 0.0;

        // head backward: gradient w.r.t. each head input hs[j+1]
        let mut dhs: Vec<Mat> = fw.hs.iter().map(|h| Mat::zeros(h.rows, h.cols)).collect();
        for j in 0..n_heads {
            let n = head_rows(t, j);
            let targets = &f.tokens[2 + j..2 + j + n];
            let w = loss_weights.get(j).copied().unwrap_or(1.0);
            let (loss, dlogits) = cross_entropy(&fw.logits[j], targets, w * grad_scale);
            per_head.push(loss);
            total += w * loss;
            if w == 0.0 {
                continue;
            }
            let hc = &fw.heads[j];
            let pre = format!("heads.{j}.");
            let lm_name = format!("{pre}lm_head");
            if grads.contains(&lm_name) {
                add_at_b(&mut grads[lm_name.as_str()], &hc.nf, &dlogits);
            }
            let dnf = matmul_bt(&dlogits, self.lm(p, j));
            let dz = norm_backward(&hc.final_norm, &self.final_norm, &dnf, None);
            let names = ["w_gate", "w_up", "w_down"].map(|n| format!("{pre}{n}"));
            let mut gg = Mat::zeros(p[names[0].as_str()].rows, p[names[0].as_str()].cols);
            let mut gu = gg.clone();
            let mut gd = Mat::zeros(p[names[2].as_str()].rows, p[names[2].as_str()].cols);
            let dnh = mlp_backward(
                &hc.mlp,
                &p[names[0].as_str()],
                &p[names[1].as_str()],
                &p[names[2].as_str()],
                &dz,
                (&mut gg, &mut gu, &mut gd),
            );
            grads[names[0].as_str()].add_assign(&gg);
            grads[names[1].as_str()].add_assign(&gu);
            grads[names[2].as_str()].add_assign(&gd);
            let norm_name = format!("{pre}norm");
            let mut dgain = vec![0.0; dz.cols];
            let dh = norm_backward(&hc.norm, &p[norm_name.as_str()].data, &dnh, Some(&mut dgain));
            for (g, d) in grads[norm_name.as_str()].data.iter_mut().zip(&dgain) {
                *g += d;
            }
            dhs[j + 1].add_assign(&dz);
            dhs[j + 1].add_assign(&dh);
        }

        // chain backward, last step first
        let d = fw.hs[0].cols;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dkeys: Vec<Mat> = fw.keys.iter().map(|k| Mat::zeros(k.rows, k.cols)).collect();
        let mut dvalues: Vec<Mat> = fw.values.iter().map(|v| Mat::zeros(v.rows, v.cols)).collect();
        for j in (0..n_heads).rev() {
            let dout = dhs[j + 1].clone();
            // residual into h_j
            dhs[j].add_rows(&dout);
            match &fw.steps[j] {
                StepCache::Identity => {}
                StepCache::Single => dvalues[j].add_assign(&dout),
                StepCache::Accumulate { norm, nq, q, probs } => {
                    let n = dout.rows;
                    let mut dq = Mat::zeros(n, d);
                    let mut dp = vec![0.0; j + 1];
                    for r in 0..n {
                        let pr = probs.row(r);
                        let dr = dout.row(r);
                        let mut sum = 0.0;
                        for m in 0..=j {
                            dp[m] = dot(dr, fw.values[m].row(r));
                            sum += pr[m] * dp[m];
                            for (o, &x) in dvalues[m].row_mut(r).iter_mut().zip(dr) {
                                *o += pr[m] * x;
                            }
                        }
                        for m in 0..=j {
                            let ds = pr[m] * (dp[m] - sum) * scale;
                            for c in 0..d {
                                dq.data[r * d + c] += ds * fw.keys[m].data[r * d + c];
                                dkeys[m].data[r * d + c] += ds * q.data[r * d + c];
                            }
                        }
                    }
                    add_at_b(&mut grads["decoder.wq"], nq, &dq);
                    let dnq = matmul_bt(&dq, &p["decoder.wq"]);
                    let mut dgain = vec![0.0; d];
                    let dh = norm_backward(norm, &p["decoder.norm"].data, &dnq, Some(&mut dgain));
                    for (g, x) in grads["decoder.norm"].data.iter_mut().zip(&dgain) {
                        *g += x;
                    }
                    dhs[j].add_rows(&dh);
                }
                StepCache::Mlp { norm, mlp } => {
                    let mut gg = Mat::zeros(2 * d, d);
                    let mut gu = Mat::zeros(2 * d, d);
                    let mut gd = Mat::zeros(d, d);
                    let dx = mlp_backward(
                        mlp,
                        &p["mlp_regressive.w_gate"],
                        &p["mlp_regressive.w_up"],
                        &p["mlp_regressive.w_down"],
                        &dout,
                        (&mut gg, &mut gu, &mut gd),
                    );
                    grads["mlp_regressive.w_gate"].add_assign(&gg);
                    grads["mlp_regressive.w_up"].add_assign(&gu);
                    grads["mlp_regressive.w_down"].add_assign(&gd);
                    let n = dx.rows;
                    let mut dnh = Mat::zeros(n, d);
                    for r in 0..n {
                        dnh.row_mut(r).copy_from_slice(&dx.row(r)[..d]);
                    }
                    let mut dgain = vec![0.0; d];
                    let dh = norm_backward(norm, &p["mlp_regressive.norm"].data, &dnh, Some(&mut dgain));
                    for (g, x) in grads["mlp_regressive.norm"].data.iter_mut().zip(&dgain) {
                        *g += x;
                    }
                    dhs[j].add_rows(&dh);
                }
            }
        }
        for (m, dv) in dvalues.iter().enumerate() {
            add_at_b(&mut grads["decoder.wv"], &fw.es[m], dv);
        }
        for (m, dk) in dkeys.iter().enumerate() {
            add_at_b(&mut grads["decoder.wk"], &fw.es[m], dk);
        }

        if let Some(cache) = &fw.aug {
            let mut dh0 = Mat::zeros(t, d);
            dh0.add_rows(&dhs[0]);
            let w = BlockRef::from_params(p, "augment.");
            let (_, g) = block_backward(&w, cache, &dh0);
            g.add_into(grads, "augment.");
        }
        if !total.is_finite() {
            return Err(Error::Divergence { step: 0, loss: total });
        }
        Ok(LossReport { total, per_head })
    }
}
