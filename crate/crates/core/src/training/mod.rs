//! Training for the draft heads (target frozen) and for small target models.
//!
//! Everything here runs in f64 with hand-written reverse-mode gradients; the
//! trained weights are stored back as f32 for inference.

pub mod block;
pub mod corpus;
pub mod gradcheck;
pub mod heads;
pub mod ops;
pub mod params;
pub mod target;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{head_accuracy_eval, HeadAccuracy};
use crate::error::{Error, Result};
use crate::kvtext::KvText;
use crate::model::{ModelConfig, TargetModel};
use crate::speculator::{Augmenting, Regressive, SeqarWeights, SpeculatorConfig};
pub use corpus::Corpus;
pub use heads::{target_features, HeadTrainer, LossReport, TargetFeatures};
pub use params::{cosine_lr, AdamW, ParamSet};

/// Optimizer and data settings shared by head training and target pretraining.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Per-head loss weights; missing entries count as 1.
    pub head_loss_weights: Vec<f64>,
    pub warmup: usize,
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Fraction of the corpus tail held out for evaluation.
    pub held_out: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 300,
            batch_size: 8,
            seq_len: 32,
            head_loss_weights: Vec::new(),
            warmup: 0,
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
            held_out: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("betas must lie in [0, 1)");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if self.seq_len < 3 {
            return bad("seq_len must be at least 3");
        }
        if self.head_loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("head_loss_weights must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.held_out) {
            return bad("held_out must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("lr", self.lr);
        kv.set("beta1", self.betas.0);
        kv.set("beta2", self.betas.1);
        kv.set("eps", self.eps);
        kv.set("weight_decay", self.weight_decay);
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("seq_len", self.seq_len);
        let w: Vec<String> = self.head_loss_weights.iter().map(f64::to_string).collect();
        kv.set("head_loss_weights", w.join(","));
        kv.set("warmup", self.warmup);
        kv.set("min_lr_ratio", self.min_lr_ratio);
        kv.set("clip_norm", self.clip_norm);
        kv.set("held_out", self.held_out);
        kv.set("seed", self.seed);
        kv
    }

    /// Missing keys keep their defaults.
    pub fn from_kv(kv: &KvText) -> Result<Self> {
        let d = Self::default();
        let head_loss_weights = match kv.get_str("head_loss_weights") {
            None | Some("") => d.head_loss_weights.clone(),
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidConfig(format!("bad head loss weight {x:?}")))
                })
                .collect::<Result<_>>()?,
        };
        let cfg = Self {
            lr: kv.get("lr")?.unwrap_or(d.lr),
            betas: (
                kv.get("beta1")?.unwrap_or(d.betas.0),
                kv.get("beta2")?.unwrap_or(d.betas.1),
            ),
            eps: kv.get("eps")?.unwrap_or(d.eps),
            weight_decay: kv.get("weight_decay")?.unwrap_or(d.weight_decay),
            steps: kv.get("steps")?.unwrap_or(d.steps),
            batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
            seq_len: kv.get("seq_len")?.unwrap_or(d.seq_len),
            head_loss_weights,
            warmup: kv.get("warmup")?.unwrap_or(d.warmup),
            min_lr_ratio: kv.get("min_lr_ratio")?.unwrap_or(d.min_lr_ratio),
            clip_norm: kv.get("clip_norm")?.unwrap_or(d.clip_norm),
            held_out: kv.get("held_out")?.unwrap_or(d.held_out),
            seed: kv.get("seed")?.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn loss_weights(&self, n_heads: usize) -> Vec<f64> {
        (0..n_heads)
            .map(|j| self.head_loss_weights.get(j).copied().unwrap_or(1.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub per_head: Vec<f64>,
    /// Before clipping.
    pub grad_norm: f64,
}

pub struct HeadTraining {
    pub weights: SeqarWeights,
    pub history: Vec<StepLog>,
    /// Top-1 and top-5 accuracy on the held-out split.
    pub eval: HeadAccuracy,
}

pub const EVAL_KS: [usize; 2] = [1, 5];

/// Training-start speculator weights (see [`SeqarWeights::init`]).
pub fn init_seqar_weights(model: &TargetModel, config: SpeculatorConfig, seed: u64) -> Result<SeqarWeights> {
    SeqarWeights::init(model, config, seed)
}

fn frozen_mask(params: &ParamSet, cfg: &SpeculatorConfig) -> Vec<bool> {
    params
        .names()
        .iter()
        .map(|n| {
            !cfg.learned_norm_gain
                && (n == "decoder.norm" || n == "mlp_regressive.norm" || (n.starts_with("heads.") && n.ends_with(".norm")))
        })
        .collect()
}

fn clip(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Train freshly initialized heads of `spec` on `corpus` with the target frozen.
pub fn train_heads(model: &TargetModel, spec: SpeculatorConfig, cfg: &TrainConfig, corpus: &Corpus) -> Result<HeadTraining> {
    let init = init_seqar_weights(model, spec, cfg.seed)?;
    train_heads_from(model, init, cfg, corpus)
}

pub fn train_heads_from(
    model: &TargetModel,
    mut weights: SeqarWeights,
    cfg: &TrainConfig,
    corpus: &Corpus,
) -> Result<HeadTraining> {
    cfg.validate()?;
    weights.validate(model)?;
    if corpus.vocab_size > model.config().vocab_size {
        return Err(Error::InvalidConfig(format!(
            "corpus vocabulary {} exceeds the model's {}",
            corpus.vocab_size,
            model.config().vocab_size
        )));
    }
    if cfg.seq_len > model.config().max_seq {
        return Err(Error::MaxSeqOverflow {
            needed: cfg.seq_len,
            max_seq: model.config().max_seq,
        });
    }
    let (train, held) = corpus.split(cfg.held_out)?;
    let trainer = HeadTrainer::new(model, weights.config.clone())?;
    let mut params = ParamSet::from_named(weights.named_tensors());
    let frozen = frozen_mask(&params, &weights.config);
    let loss_weights = cfg.loss_weights(weights.config.n_heads);
    let mut opt = AdamW::new(&params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        let mut per_head = vec![0.0; weights.config.n_heads];
        for _ in 0..cfg.batch_size {
            let window = train.sample_window(cfg.seq_len, &mut rng)?;
            let feat = target_features(model, window)?;
            let rep = trainer
                .loss_and_grad(&params, &feat, &loss_weights, scale, &mut grads)
                .map_err(|e| at_step(e, step))?;
            loss += rep.total * scale;
            for (a, b) in per_head.iter_mut().zip(&rep.per_head) {
                *a += b * scale;
            }
        }
        if !grads.all_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        let grad_norm = clip(&mut grads, cfg.clip_norm);
        let lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup, cfg.min_lr_ratio);
        opt.step(&mut params, &grads, lr, &frozen);
        history.push(StepLog {
            step,
            lr,
            loss,
            per_head,
            grad_norm,
        });
    }
    params.store(weights.named_tensors_mut());
    if !weights.named_tensors().iter().all(|(_, t)| t.is_finite()) {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: history.last().map_or(f64::NAN, |h| h.loss),
        });
    }
    let eval_split = if held.len() >= cfg.seq_len { &held } else { &train };
    let eval = head_accuracy_eval(model, &weights, eval_split, cfg.seq_len, &EVAL_KS)?;
    Ok(HeadTraining { weights, history, eval })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { loss, .. } => Error::Divergence { step, loss },
        other => other,
    }
}

/// Next-token pretraining of a fresh target model on `corpus`.
/// Returns the model and the per-step mean loss.
pub fn pretrain_target(config: ModelConfig, cfg: &TrainConfig, corpus: &Corpus) -> Result<(TargetModel, Vec<f64>)> {
    cfg.validate()?;
    let mut model = TargetModel::random(config.clone())?;
    if corpus.vocab_size > config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "corpus vocabulary {} exceeds the model's {}",
            corpus.vocab_size, config.vocab_size
        )));
    }
    if cfg.seq_len + 1 > config.max_seq {
        return Err(Error::MaxSeqOverflow {
            needed: cfg.seq_len + 1,
            max_seq: config.max_seq,
        });
    }
    let (train, _) = corpus.split(cfg.held_out)?;
    let mut params = ParamSet::from_named(model.named_tensors());
    let mut opt = AdamW::new(&params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / cfg.batch_size as f64;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let window = train.sample_window(cfg.seq_len + 1, &mut rng)?;
            loss += target::lm_loss_and_grad(&config, &params, window, scale, &mut grads)
                .map_err(|e| at_step(e, step))?
                * scale;
        }
        clip(&mut grads, cfg.clip_norm);
        let lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup, cfg.min_lr_ratio);
        opt.step(&mut params, &grads, lr, &[]);
        history.push(loss);
    }
    if !params.all_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: history.last().copied().unwrap_or(f64::NAN),
        });
    }
    params.store(model.named_tensors_mut());
    Ok((model, history))
}

str_enum! {
    /// Speculator structure compared in the ablation study.
    pub enum AblationKind {
        SeqarFull => "seqar_full",
        MlpRegressive => "mlp_regressive",
        NoRegressive => "no_regressive",
        Medusa => "medusa",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub kind: AblationKind,
    pub augmenting: Augmenting,
}

impl AblationVariant {
    pub fn new(kind: AblationKind, augmenting: Augmenting) -> Self {
        Self { kind, augmenting }
    }

    pub fn name(&self) -> String {
        match self.kind {
            AblationKind::Medusa => "medusa".into(),
            k => format!("{k}/{}", self.augmenting),
        }
    }

    pub fn config(&self, n_heads: usize) -> SpeculatorConfig {
        let base = SpeculatorConfig {
            augmenting: self.augmenting,
            ..SpeculatorConfig::seqar(n_heads)
        };
        match self.kind {
            AblationKind::SeqarFull => base,
            AblationKind::MlpRegressive => SpeculatorConfig {
                regressive: Regressive::Mlp,
                ..base
            },
            AblationKind::NoRegressive => SpeculatorConfig {
                regressive: Regressive::None,
                ..base
            },
            AblationKind::Medusa => SpeculatorConfig::medusa(n_heads),
        }
    }

    /// The component-removal sequence plus the augmenting-block variants.
    pub fn standard_set() -> Vec<Self> {
        let mut v: Vec<Self> = [AblationKind::SeqarFull, AblationKind::MlpRegressive, AblationKind::NoRegressive]
            .into_iter()
            .map(|k| Self::new(k, Augmenting::FullTransformer))
            .collect();
        v.push(Self::new(AblationKind::Medusa, Augmenting::None));
        for aug in [Augmenting::AttentionOnly, Augmenting::MlpOnly, Augmenting::None] {
            v.push(Self::new(AblationKind::SeqarFull, aug));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// 1-based.
    pub head: usize,
    pub k: usize,
    pub accuracy: f64,
}

/// Train each variant's heads and report held-out top-k accuracy per head.
pub fn ablation_suite(
    model: &TargetModel,
    corpus: &Corpus,
    variants: &[AblationVariant],
    n_heads: usize,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants {
        let trained = train_heads(model, v.config(n_heads), cfg, corpus)?;
        for head in 0..n_heads {
            for (ki, &k) in trained.eval.ks.iter().enumerate() {
                rows.push(AblationRow {
                    variant: v.name(),
                    head: head + 1,
                    k,
                    accuracy: trained.eval.accuracy[head][ki],
                });
            }
        }
    }
    Ok(rows)
}
