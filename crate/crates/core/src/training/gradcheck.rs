//! Central finite-difference check of the head-training gradients.

use serde::Serialize;

use super::heads::{HeadTrainer, TargetFeatures};
use super::params::ParamSet;
use crate::error::Result;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
}

fn total_loss(t: &HeadTrainer, p: &ParamSet, feats: &[TargetFeatures], w: &[f64]) -> Result<f64> {
    let mut scratch = p.zeros_like();
    let mut sum = 0.0;
    for f in feats {
        sum += t.loss_and_grad(p, f, w, 1.0, &mut scratch)?.total;
    }
    Ok(sum)
}

/// Compare every entry of every tensor against `(L(θ+h) - L(θ-h)) / 2h`.
pub fn check_head_gradients(
    trainer: &HeadTrainer,
    params: &ParamSet,
    feats: &[TargetFeatures],
    loss_weights: &[f64],
    h: f64,
) -> Result<Vec<GradCheck>> {
    let mut grads = params.zeros_like();
    for f in feats {
        trainer.loss_and_grad(params, f, loss_weights, 1.0, &mut grads)?;
    }
    let mut out = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for (i, name) in params.names().iter().enumerate() {
        let mut worst = 0.0f64;
        let n = params.mats()[i].data.len();
        for j in 0..n {
            let orig = params.mats()[i].data[j];
            probe.mats_mut()[i].data[j] = orig + h;
            let up = total_loss(trainer, &probe, feats, loss_weights)?;
            probe.mats_mut()[i].data[j] = orig - h;
            let down = total_loss(trainer, &probe, feats, loss_weights)?;
            probe.mats_mut()[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.mats()[i].data[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        out.push(GradCheck {
            name: name.clone(),
            entries: n,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
