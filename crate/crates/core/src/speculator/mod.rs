//! Draft heads: Medusa-style parallel heads and regressive heads.
//!
//! Both variants share one weight layout. A Medusa speculator is the
//! regressive one with the augmenting block and the regressive connection
//! removed, plus (by default) an individual LM head per draft head.

mod stream;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use stream::{
    embed_from_lm_head, AugmentState, RoundExpander, SpecRound, SpecStream, Speculator,
    SpeculatorState,
};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kvtext::KvText;
use crate::model::{BlockWeights, TargetModel};
use crate::numerics::{NormKind, TensorF32};

str_enum! {
    pub enum Variant {
        Medusa => "medusa",
        Seqar => "seqar",
    }
}

str_enum! {
    /// Which sublayers of the augmenting block run.
    pub enum Augmenting {
        None => "none",
        AttentionOnly => "attn",
        MlpOnly => "mlp",
        FullTransformer => "full",
    }
}

str_enum! {
    /// How the previous speculated token feeds the next head.
    pub enum Regressive {
        /// Single-query attention decoder over token embeddings.
        AttentionDecoder => "attention",
        /// Gated MLP over `[normalize(h); e]`.
        Mlp => "mlp",
        /// No connection: every head reads the same hidden state.
        None => "none",
    }
}

str_enum! {
    pub enum DecoderKv {
        /// One key/value pair per step (the attention weight is always 1).
        Single => "single",
        /// Attend over every key/value pair produced so far in the round.
        Accumulate => "accumulate",
    }
}

impl Augmenting {
    pub fn sublayers(self) -> Option<crate::model::Sublayers> {
        use crate::model::Sublayers;
        match self {
            Augmenting::None => None,
            Augmenting::AttentionOnly => Some(Sublayers {
                attention: true,
                mlp: false,
            }),
            Augmenting::MlpOnly => Some(Sublayers {
                attention: false,
                mlp: true,
            }),
            Augmenting::FullTransformer => Some(Sublayers::FULL),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculatorConfig {
    pub n_heads: usize,
    pub top_k: usize,
    pub variant: Variant,
    pub augmenting: Augmenting,
    pub regressive: Regressive,
    pub decoder_kv: DecoderKv,
    pub share_lm_head: bool,
    /// Normalization used inside the decoder and the head MLPs.
    pub norm_kind: NormKind,
    /// Whether those normalization gains are trained or fixed at one.
    pub learned_norm_gain: bool,
}

pub const DEFAULT_HEADS: usize = 3;
pub const DEFAULT_TOP_K: usize = 4;

impl Default for SpeculatorConfig {
    fn default() -> Self {
        Self::seqar(DEFAULT_HEADS)
    }
}

impl SpeculatorConfig {
    pub fn seqar(n_heads: usize) -> Self {
        Self {
            n_heads,
            top_k: DEFAULT_TOP_K,
            variant: Variant::Seqar,
            augmenting: Augmenting::FullTransformer,
            regressive: Regressive::AttentionDecoder,
            decoder_kv: DecoderKv::Single,
            share_lm_head: true,
            norm_kind: NormKind::Rms,
            learned_norm_gain: true,
        }
    }

    pub fn medusa(n_heads: usize) -> Self {
        Self {
            variant: Variant::Medusa,
            augmenting: Augmenting::None,
            regressive: Regressive::None,
            share_lm_head: false,
            ..Self::seqar(n_heads)
        }
    }

    pub fn for_variant(variant: Variant, n_heads: usize) -> Self {
        match variant {
            Variant::Medusa => Self::medusa(n_heads),
            Variant::Seqar => Self::seqar(n_heads),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 {
            return Err(Error::InvalidConfig("n_heads must be >= 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be >= 1".into()));
        }
        if self.variant == Variant::Medusa
            && (self.augmenting != Augmenting::None || self.regressive != Regressive::None)
        {
            return Err(Error::InvalidConfig(
                "medusa heads take neither an augmenting block nor a regressive connection".into(),
            ));
        }
        Ok(())
    }

    /// Head `i`'s logits depend only on the committed context, not on the
    /// speculated path above it.
    pub fn path_independent(&self) -> bool {
        self.regressive == Regressive::None
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("n_heads", self.n_heads);
        kv.set("top_k", self.top_k);
        kv.set("variant", self.variant);
        kv.set("augmenting", self.augmenting);
        kv.set("regressive", self.regressive);
        kv.set("decoder_kv", self.decoder_kv);
        kv.set("share_lm_head", self.share_lm_head);
        kv.set("norm_kind", self.norm_kind);
        kv.set("learned_norm_gain", self.learned_norm_gain);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        let cfg = Self {
            n_heads: kv.require("n_heads")?,
            top_k: kv.require("top_k")?,
            variant: kv.require("variant")?,
            augmenting: kv.require("augmenting")?,
            regressive: kv.require("regressive")?,
            decoder_kv: kv.require("decoder_kv")?,
            share_lm_head: kv.require("share_lm_head")?,
            norm_kind: kv.get("norm_kind")?.unwrap_or_default(),
            learned_norm_gain: kv.get("learned_norm_gain")?.unwrap_or(true),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Attention decoder: `Q = normalize(h) W_Q`, `K = e W_K`, `V = e W_V`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub norm: TensorF32,
    pub wq: TensorF32,
    pub wk: TensorF32,
    pub wv: TensorF32,
}

/// Regressive MLP over `[normalize(h); e]`, `2d -> d` with hidden width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpRegressiveWeights {
    pub norm: TensorF32,
    pub w_gate: TensorF32,
    pub w_up: TensorF32,
    pub w_down: TensorF32,
}

/// One draft head: `z = h + W_down(silu(n W_gate) ⊙ n W_up)`, `n = normalize(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub norm: TensorF32,
    pub w_gate: TensorF32,
    pub w_up: TensorF32,
    pub w_down: TensorF32,
    /// Individual `[d_model, vocab]` LM head; `None` shares the target's.
    pub lm_head: Option<TensorF32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqarWeights {
    pub config: SpeculatorConfig,
    pub augment: Option<BlockWeights>,
    pub decoder: Option<DecoderWeights>,
    pub mlp_regressive: Option<MlpRegressiveWeights>,
    pub heads: Vec<HeadWeights>,
}

/// Std of the Gaussian noise added to the identity in `W_Q` and `W_K`.
pub const QK_INIT_STD: f32 = 0.01;

impl SeqarWeights {
    /// Training-start weights: augmenting block copied from the target's last
    /// block, `W_Q, W_K = I + noise`, `W_V = 0`, head output projections zero.
    pub fn init(model: &TargetModel, config: SpeculatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.config().d_model;
        let noisy_identity = |rng: &mut ChaCha8Rng| {
            let noise = TensorF32::randn(&[d, d], QK_INIT_STD, rng);
            TensorF32::identity(d).add(&noise)
        };
        let augment = config
            .augmenting
            .sublayers()
            .map(|_| model.blocks()[model.config().n_layers - 1].clone());
        let decoder = match config.regressive {
            Regressive::AttentionDecoder => Some(DecoderWeights {
                norm: TensorF32::filled(&[d], 1.0),
                wq: noisy_identity(&mut rng)?,
                wk: noisy_identity(&mut rng)?,
                wv: TensorF32::zeros(&[d, d]),
            }),
            _ => None,
        };
        let mlp_regressive = match config.regressive {
            Regressive::Mlp => {
                let std = 1.0 / ((2 * d) as f32).sqrt();
                Some(MlpRegressiveWeights {
                    norm: TensorF32::filled(&[d], 1.0),
                    w_gate: TensorF32::randn(&[2 * d, d], std, &mut rng),
                    w_up: TensorF32::randn(&[2 * d, d], std, &mut rng),
                    w_down: TensorF32::zeros(&[d, d]),
                })
            }
            _ => None,
        };
        let std = 1.0 / (d as f32).sqrt();
        let heads = (0..config.n_heads)
            .map(|_| HeadWeights {
                norm: TensorF32::filled(&[d], 1.0),
                w_gate: TensorF32::randn(&[d, d], std, &mut rng),
                w_up: TensorF32::randn(&[d, d], std, &mut rng),
                w_down: TensorF32::zeros(&[d, d]),
                lm_head: (!config.share_lm_head).then(|| model.lm_head().clone()),
            })
            .collect();
        let w = Self {
            config,
            augment,
            decoder,
            mlp_regressive,
            heads,
        };
        w.validate(model)?;
        Ok(w)
    }

    /// Every tensor under its name (without the checkpoint `spec.` prefix).
    pub fn named_tensors(&self) -> Vec<(String, &TensorF32)> {
        let mut out = Vec::new();
        if let Some(b) = &self.augment {
            for (n, t) in BlockWeights::NAMES.iter().zip(b.tensors()) {
                out.push((format!("augment.{n}"), t));
            }
        }
        if let Some(dw) = &self.decoder {
            for (n, t) in [("norm", &dw.norm), ("wq", &dw.wq), ("wk", &dw.wk), ("wv", &dw.wv)] {
                out.push((format!("decoder.{n}"), t));
            }
        }
        if let Some(m) = &self.mlp_regressive {
            for (n, t) in [("norm", &m.norm), ("w_gate", &m.w_gate), ("w_up", &m.w_up), ("w_down", &m.w_down)] {
                out.push((format!("mlp_regressive.{n}"), t));
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            for (n, t) in [("norm", &h.norm), ("w_gate", &h.w_gate), ("w_up", &h.w_up), ("w_down", &h.w_down)] {
                out.push((format!("heads.{i}.{n}"), t));
            }
            if let Some(lm) = &h.lm_head {
                out.push((format!("heads.{i}.lm_head"), lm));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut TensorF32)> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.augment {
            for (n, t) in BlockWeights::NAMES.iter().zip(b.tensors_mut()) {
                out.push((format!("augment.{n}"), t));
            }
        }
        if let Some(dw) = &mut self.decoder {
            for (n, t) in [("norm", &mut dw.norm), ("wq", &mut dw.wq), ("wk", &mut dw.wk), ("wv", &mut dw.wv)] {
                out.push((format!("decoder.{n}"), t));
            }
        }
        if let Some(m) = &mut self.mlp_regressive {
            for (n, t) in [
                ("norm", &mut m.norm),
                ("w_gate", &mut m.w_gate),
                ("w_up", &mut m.w_up),
                ("w_down", &mut m.w_down),
            ] {
                out.push((format!("mlp_regressive.{n}"), t));
            }
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            for (n, t) in [
                ("norm", &mut h.norm),
                ("w_gate", &mut h.w_gate),
                ("w_up", &mut h.w_up),
                ("w_down", &mut h.w_down),
            ] {
                out.push((format!("heads.{i}.{n}"), t));
            }
            if let Some(lm) = &mut h.lm_head {
                out.push((format!("heads.{i}.lm_head"), lm));
            }
        }
        out
    }

    /// Shapes and finiteness against the target model.
    pub fn validate(&self, model: &TargetModel) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let mc = model.config();
        let (d, v) = (mc.d_model, mc.vocab_size);
        if self.heads.len() != c.n_heads {
            return Err(Error::shape("speculator", format!("{} heads, config says {}", self.heads.len(), c.n_heads)));
        }
        let present = [
            ("augment", self.augment.is_some(), c.augmenting != Augmenting::None),
            ("decoder", self.decoder.is_some(), c.regressive == Regressive::AttentionDecoder),
            ("mlp_regressive", self.mlp_regressive.is_some(), c.regressive == Regressive::Mlp),
        ];
        for (name, have, want) in present {
            if have != want {
                return Err(Error::shape("speculator", format!("{name} present={have}, expected {want}")));
            }
        }
        if let Some(b) = &self.augment {
            b.check_shapes(mc)?;
        }
        for (name, t) in self.named_tensors() {
            let want: Vec<usize> = if name.ends_with("norm") {
                vec![d]
            } else if name.ends_with("lm_head") {
                vec![d, v]
            } else if name.starts_with("augment.") {
                continue;
            } else if name.starts_with("mlp_regressive.w_gate") || name.starts_with("mlp_regressive.w_up") {
                vec![2 * d, d]
            } else {
                vec![d, d]
            };
            if t.shape() != want.as_slice() {
                return Err(Error::shape("speculator", format!("{name}: {:?} != {want:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "speculator weights" });
            }
        }
        for h in &self.heads {
            if h.lm_head.is_some() == c.share_lm_head {
                return Err(Error::shape("speculator", "per-head LM head presence disagrees with share_lm_head"));
            }
        }
        Ok(())
    }

    /// Store under `spec.`-prefixed tensor names and config keys.
    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        ckpt.config.merge_prefixed("spec", &self.config.to_kv());
        for (name, t) in self.named_tensors() {
            ckpt.insert(format!("spec.{name}"), t.clone());
        }
    }

    /// `Ok(None)` if the checkpoint holds no speculator.
    pub fn read_from(ckpt: &mut Checkpoint, model: &TargetModel) -> Result<Option<Self>> {
        let kv = ckpt.config.section("spec");
        if kv.keys().next().is_none() {
            return Ok(None);
        }
        let config = SpeculatorConfig::from_kv(&kv)?;
        let d = model.config().d_model;
        let mut w = Self {
            augment: config.augmenting.sublayers().map(|_| model.blocks()[0].clone()),
            decoder: (config.regressive == Regressive::AttentionDecoder).then(|| DecoderWeights {
                norm: TensorF32::zeros(&[d]),
                wq: TensorF32::zeros(&[d, d]),
                wk: TensorF32::zeros(&[d, d]),
                wv: TensorF32::zeros(&[d, d]),
            }),
            mlp_regressive: (config.regressive == Regressive::Mlp).then(|| MlpRegressiveWeights {
                norm: TensorF32::zeros(&[d]),
                w_gate: TensorF32::zeros(&[2 * d, d]),
                w_up: TensorF32::zeros(&[2 * d, d]),
                w_down: TensorF32::zeros(&[d, d]),
            }),
            heads: (0..config.n_heads)
                .map(|_| HeadWeights {
                    norm: TensorF32::zeros(&[d]),
                    w_gate: TensorF32::zeros(&[d, d]),
                    w_up: TensorF32::zeros(&[d, d]),
                    w_down: TensorF32::zeros(&[d, d]),
                    lm_head: (!config.share_lm_head).then(|| TensorF32::zeros(&[0])),
                })
                .collect(),
            config,
        };
        for (name, slot) in w.named_tensors_mut() {
            *slot = ckpt.take(&format!("spec.{name}"))?;
        }
        w.validate(model)?;
        Ok(Some(w))
    }
}

/// Target model plus optional speculator, saved as one checkpoint.
pub fn save_bundle(path: impl AsRef<std::path::Path>, model: &TargetModel, spec: Option<&SeqarWeights>) -> Result<()> {
    let mut ckpt = Checkpoint::new(KvText::new());
    ckpt.config.merge_prefixed("model", &model.config().to_kv());
    for (name, t) in model.named_tensors() {
        ckpt.insert(name, t.clone());
    }
    if let Some(s) = spec {
        s.write_to(&mut ckpt);
    }
    ckpt.save(path)
}

pub fn load_bundle(path: impl AsRef<std::path::Path>) -> Result<(TargetModel, Option<SeqarWeights>)> {
    let mut ckpt = Checkpoint::load(path)?;
    let cfg = crate::model::ModelConfig::from_kv(&ckpt.config.section("model"))?;
    let model = TargetModel::from_named(cfg, |n| ckpt.take(n))?;
    let spec = SeqarWeights::read_from(&mut ckpt, &model)?;
    if let Some(extra) = ckpt.names().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((model, spec))
}
