//! Next-token training of the target model itself (f64).

use super::block::{block_backward, block_forward, BlockCache, BlockRef, BlockShape};
use super::ops::{add_at_b, cross_entropy, matmul, matmul_bt, norm_backward, norm_forward, Mat};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Sublayers};

/// Mean next-token cross-entropy over `tokens`; adds `grad_scale`-scaled
/// gradients into `grads`.
pub fn lm_loss_and_grad(
    cfg: &ModelConfig,
    p: &ParamSet,
    tokens: &[u32],
    grad_scale: f64,
    grads: &mut ParamSet,
) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidConfig("language-model sequences need >= 2 tokens".into()));
    }
    let shape = BlockShape::from(cfg);
    let inputs = &tokens[..tokens.len() - 1];
    let emb = &p["tok_embedding"];
    let mut x = Mat::zeros(inputs.len(), cfg.d_model);
    for (i, &t) in inputs.iter().enumerate() {
        x.row_mut(i).copy_from_slice(emb.row(t as usize));
    }
    let prefixes: Vec<String> = (0..cfg.n_layers).map(|l| format!("blocks.{l}.")).collect();
    let mut caches: Vec<BlockCache> = Vec::with_capacity(cfg.n_layers);
    for pre in &prefixes {
        let (y, c) = block_forward(&BlockRef::from_params(p, pre), shape, Sublayers::FULL, &x);
        caches.push(c);
        x = y;
    }
    let (nf, fcache) = norm_forward(cfg.norm_kind, &x, &p["final_norm"].data);
    let logits = matmul(&nf, &p["lm_head"]);
    let (loss, dlogits) = cross_entropy(&logits, &tokens[1..], grad_scale);
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }

    add_at_b(&mut grads["lm_head"], &nf, &dlogits);
    let dnf = matmul_bt(&dlogits, &p["lm_head"]);
    let mut dgain = vec![0.0; cfg.d_model];
    let mut dx = norm_backward(&fcache, &p["final_norm"].data, &dnf, Some(&mut dgain));
    for (g, d) in grads["final_norm"].data.iter_mut().zip(&dgain) {
        *g += d;
    }
    for (pre, cache) in prefixes.iter().zip(&caches).rev() {
        let (dprev, g) = block_backward(&BlockRef::from_params(p, pre), cache, &dx);
        g.add_into(grads, pre);
        dx = dprev;
    }
    let gemb = &mut grads["tok_embedding"];
    for (i, &t) in inputs.iter().enumerate() {
        for (o, d) in gemb.row_mut(t as usize).iter_mut().zip(dx.row(i)) {
            *o += d;
        }
    }
    Ok(loss)
}
