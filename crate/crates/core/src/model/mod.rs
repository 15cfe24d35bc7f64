//! Small pre-norm decoder-only transformer used as the target model.
//!
//! Prefill, single-token decode and tree verification all go through
//! [`TargetModel::forward_staged`]: the new tokens are appended to the KV cache
//! as staged rows, each row attending to the committed context plus its own
//! ancestors among the staged rows. Rotary positions are `committed + depth`.

mod cache;
mod rope;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{KvCache, LayerKv};
pub use rope::{rope_angle, Rope, ROPE_BASE};

use crate::error::{Error, Result};
use crate::kvtext::KvText;
use crate::numerics::{
    attend_row, dot, matmul, mlp_forward, normalize_rows, NormKind, TensorF32, NORM_EPS,
};
use crate::token_tree::TokenTree;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale byte-level model.
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            d_ff: 256,
            vocab_size: 256,
            max_seq: 512,
            norm_kind: NormKind::Rms,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Config with `d_head` derived from `d_model / n_heads`.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads.max(1),
            d_ff,
            vocab_size,
            max_seq,
            norm_kind: NormKind::Rms,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::InvalidConfig("d_head must be even for rotary embeddings".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("n_layers", self.n_layers);
        kv.set("d_model", self.d_model);
        kv.set("n_heads", self.n_heads);
        kv.set("d_head", self.d_head);
        kv.set("d_ff", self.d_ff);
        kv.set("vocab_size", self.vocab_size);
        kv.set("max_seq", self.max_seq);
        kv.set("norm_kind", self.norm_kind);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        let cfg = Self {
            n_layers: kv.require("n_layers")?,
            d_model: kv.require("d_model")?,
            n_heads: kv.require("n_heads")?,
            d_head: kv.require("d_head")?,
            d_ff: kv.require("d_ff")?,
            vocab_size: kv.require("vocab_size")?,
            max_seq: kv.require("max_seq")?,
            norm_kind: kv.require("norm_kind")?,
            seed: kv.get("seed")?.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Weights of one pre-norm transformer block. Projections are `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: TensorF32,
    pub wq: TensorF32,
    pub wk: TensorF32,
    pub wv: TensorF32,
    pub wo: TensorF32,
    pub mlp_norm: TensorF32,
    pub w_gate: TensorF32,
    pub w_up: TensorF32,
    pub w_down: TensorF32,
}

impl BlockWeights {
    pub fn random(cfg: &ModelConfig, std: f32, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Self {
            attn_norm: TensorF32::filled(&[d], 1.0),
            wq: TensorF32::randn(&[d, d], std, rng),
            wk: TensorF32::randn(&[d, d], std, rng),
            wv: TensorF32::randn(&[d, d], std, rng),
            wo: TensorF32::randn(&[d, d], std, rng),
            mlp_norm: TensorF32::filled(&[d], 1.0),
            w_gate: TensorF32::randn(&[d, f], std, rng),
            w_up: TensorF32::randn(&[d, f], std, rng),
            w_down: TensorF32::randn(&[f, d], std, rng),
        }
    }

    pub const NAMES: [&'static str; 9] = [
        "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down",
    ];

    pub fn tensors(&self) -> [&TensorF32; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut TensorF32; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let want: [&[usize]; 9] = [&[d], &[d, d], &[d, d], &[d, d], &[d, d], &[d], &[d, f], &[d, f], &[f, d]];
        for ((name, t), w) in Self::NAMES.iter().zip(self.tensors()).zip(want) {
            if t.shape() != w {
                return Err(Error::shape("block", format!("{name}: {:?} != {w:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Which sublayers of a block run. The target model always runs both; the
/// augmenting block variants switch them individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sublayers {
    pub attention: bool,
    pub mlp: bool,
}

impl Sublayers {
    pub const FULL: Sublayers = Sublayers {
        attention: true,
        mlp: true,
    };
}

/// Placement of a staged batch: committed prefix length, rotary positions and
/// each row's ancestors-or-self among the staged rows (ascending).
pub(crate) struct StageLayout {
    pub committed: usize,
    pub positions: Vec<usize>,
    pub ancestors: Vec<Vec<usize>>,
}

impl StageLayout {
    pub fn from_parents(committed: usize, parents: &[Option<usize>]) -> Result<Self> {
        let mut depth = Vec::with_capacity(parents.len());
        let mut ancestors: Vec<Vec<usize>> = Vec::with_capacity(parents.len());
        for (i, p) in parents.iter().enumerate() {
            match *p {
                None => {
                    depth.push(0);
                    ancestors.push(vec![i]);
                }
                Some(p) if p < i => {
                    depth.push(depth[p] + 1);
                    let mut a = ancestors[p].clone();
                    a.push(i);
                    ancestors.push(a);
                }
                Some(p) => {
                    return Err(Error::InvalidTree(format!(
                        "parent {p} of node {i} is not earlier in the order"
                    )))
                }
            }
        }
        Ok(Self {
            committed,
            positions: depth.iter().map(|d| committed + d).collect(),
            ancestors,
        })
    }

    /// Dense mask over `[committed + staged]` key columns.
    #[cfg(test)]
    pub fn mask(&self) -> Result<crate::numerics::AttnMask> {
        let n = self.positions.len();
        let c = self.committed;
        crate::numerics::AttnMask::from_fn(n, c + n, |i, j| j < c || self.ancestors[i].contains(&(j - c)))
    }
}

/// Run one block over the staged rows `x`, appending their keys/values to `kv`.
pub(crate) fn block_forward(
    block: &BlockWeights,
    cfg: &ModelConfig,
    rope: &Rope,
    x: &mut TensorF32,
    layout: &StageLayout,
    kv: &mut LayerKv,
    sub: Sublayers,
) -> Result<()> {
    let (n, d) = (x.rows(), cfg.d_model);
    if sub.attention {
        let normed = normalize_rows(cfg.norm_kind, x, &block.attn_norm, NORM_EPS)?;
        let mut q = matmul(&normed, &block.wq)?;
        let mut k = matmul(&normed, &block.wk)?;
        let v = matmul(&normed, &block.wv)?;
        for i in 0..n {
            rope.apply(q.row_mut(i), layout.positions[i]);
            rope.apply(k.row_mut(i), layout.positions[i]);
        }
        kv.keys.extend_from_slice(k.data());
        kv.values.extend_from_slice(v.data());

        let dh = cfg.d_head;
        let scale = 1.0 / (dh as f32).sqrt();
        let c = layout.committed;
        let mut out = vec![0.0f32; n * d];
        let mut scores: Vec<(usize, f32)> = Vec::with_capacity(c + n);
        for i in 0..n {
            for h in 0..cfg.n_heads {
                let lo = h * dh;
                let qi = &q.row(i)[lo..lo + dh];
                scores.clear();
                let cols = (0..c).chain(layout.ancestors[i].iter().map(|a| c + a));
                for j in cols {
                    scores.push((j, dot(qi, &kv.keys[j * d + lo..j * d + lo + dh]) * scale));
                }
                let values = &kv.values;
                attend_row(
                    &mut scores,
                    |j| &values[j * d + lo..j * d + lo + dh],
                    &mut out[i * d + lo..i * d + lo + dh],
                );
            }
        }
        let attn = matmul(&TensorF32::matrix(n, d, out)?, &block.wo)?;
        *x = x.add(&attn)?;
    } else {
        // keep row bookkeeping aligned with the cache even when attention is off
        kv.keys.resize(kv.keys.len() + n * d, 0.0);
        kv.values.resize(kv.values.len() + n * d, 0.0);
    }
    if sub.mlp {
        let normed = normalize_rows(cfg.norm_kind, x, &block.mlp_norm, NORM_EPS)?;
        let m = mlp_forward(&normed, &block.w_up, &block.w_gate, &block.w_down)?;
        *x = x.add(&m)?;
    }
    Ok(())
}

/// Output of a forward over a single new position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Last-block hidden state before the final norm, `[d_model]`.
    pub hidden: TensorF32,
    pub logits: TensorF32,
}

/// Per-node outputs of a staged forward.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedOutput {
    pub hidden: TensorF32,
    pub logits: TensorF32,
}

#[derive(Debug, Clone)]
pub struct TargetModel {
    config: ModelConfig,
    token_embedding: TensorF32,
    blocks: Vec<BlockWeights>,
    final_norm: TensorF32,
    lm_head: TensorF32,
    rope: Rope,
}

pub const INIT_STD: f32 = 0.02;

impl TargetModel {
    /// Seeded Gaussian initialization (std 0.02) from `config.seed`.
    pub fn random(config: ModelConfig) -> Result<Self> {
        Self::random_with_std(config, INIT_STD)
    }

    pub fn random_with_std(config: ModelConfig, std: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let token_embedding = TensorF32::randn(&[v, d], std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights::random(&config, std, &mut rng))
            .collect();
        let lm_head = TensorF32::randn(&[d, v], std, &mut rng);
        Self::from_parts(config, token_embedding, blocks, TensorF32::filled(&[d], 1.0), lm_head)
    }

    pub fn from_parts(
        config: ModelConfig,
        token_embedding: TensorF32,
        blocks: Vec<BlockWeights>,
        final_norm: TensorF32,
        lm_head: TensorF32,
    ) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        if token_embedding.shape() != [v, d] || final_norm.shape() != [d] || lm_head.shape() != [d, v] {
            return Err(Error::shape("target_model", "embedding / final norm / lm head"));
        }
        if blocks.len() != config.n_layers {
            return Err(Error::shape("target_model", "block count"));
        }
        for b in &blocks {
            b.check_shapes(&config)?;
        }
        let all_finite = token_embedding.is_finite()
            && final_norm.is_finite()
            && lm_head.is_finite()
            && blocks.iter().all(|b| b.tensors().iter().all(|t| t.is_finite()));
        if !all_finite {
            return Err(Error::NonFinite { op: "target_model weights" });
        }
        let rope = Rope::new(config.d_head, config.max_seq);
        Ok(Self {
            config,
            token_embedding,
            blocks,
            final_norm,
            lm_head,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> &TensorF32 {
        &self.token_embedding
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn final_norm(&self) -> &TensorF32 {
        &self.final_norm
    }

    /// `[d_model, vocab]`.
    pub fn lm_head(&self) -> &TensorF32 {
        &self.lm_head
    }

    pub fn rope(&self) -> &Rope {
        &self.rope
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.n_layers, self.config.d_model, self.config.max_seq)
    }

    pub fn check_token(&self, token: u32) -> Result<()> {
        if (token as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(Error::InvalidToken {
                token,
                vocab: self.config.vocab_size,
            })
        }
    }

    /// Final norm followed by the LM head, row-wise.
    pub fn logits_from_hidden(&self, hidden: &TensorF32) -> Result<TensorF32> {
        let normed = normalize_rows(self.config.norm_kind, hidden, &self.final_norm, NORM_EPS)?;
        let rows = normed.rows();
        let normed = normed.reshape(vec![rows, self.config.d_model])?;
        matmul(&normed, &self.lm_head)
    }

    /// Forward `tokens` as staged rows with the given parent structure.
    pub(crate) fn forward_staged(
        &self,
        cache: &mut KvCache,
        tokens: &[u32],
        parents: &[Option<usize>],
    ) -> Result<StagedOutput> {
        if tokens.is_empty() || tokens.len() != parents.len() {
            return Err(Error::InvalidTree("empty staged batch".into()));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let layout = StageLayout::from_parents(cache.committed_len(), parents)?;
        cache.begin_stage(parents)?;
        let d = self.config.d_model;
        let mut x = TensorF32::zeros(&[tokens.len(), d]);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.token_embedding.row(t as usize));
        }
        let result = (|| {
            for (l, block) in self.blocks.iter().enumerate() {
                block_forward(block, &self.config, &self.rope, &mut x, &layout, cache.layer_mut(l), Sublayers::FULL)?;
            }
            let logits = self.logits_from_hidden(&x)?;
            Ok(StagedOutput { hidden: x, logits })
        })();
        if result.is_err() {
            cache.rollback();
        }
        result
    }

    /// Process the whole prompt in one pass and commit it. Returns every row.
    pub fn prefill_rows(&self, cache: &mut KvCache, prompt: &[u32]) -> Result<StagedOutput> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt must be non-empty"));
        }
        let parents: Vec<Option<usize>> = (0..prompt.len()).map(|i| i.checked_sub(1)).collect();
        let out = self.forward_staged(cache, prompt, &parents)?;
        let path: Vec<usize> = (0..prompt.len()).collect();
        cache.commit_staged(&path)?;
        Ok(out)
    }

    /// Process the whole prompt in one pass and commit it.
    pub fn prefill(&self, cache: &mut KvCache, prompt: &[u32]) -> Result<StepOutput> {
        let out = self.prefill_rows(cache, prompt)?;
        let last = prompt.len() - 1;
        Ok(StepOutput {
            hidden: TensorF32::vector(out.hidden.row(last).to_vec()),
            logits: TensorF32::vector(out.logits.row(last).to_vec()),
        })
    }

    /// Feed one token after the committed context and commit it.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32) -> Result<StepOutput> {
        let out = self.forward_staged(cache, &[token], &[None])?;
        cache.commit_staged(&[0])?;
        Ok(StepOutput {
            hidden: out.hidden.reshape(vec![self.config.d_model])?,
            logits: out.logits.reshape(vec![self.config.vocab_size])?,
        })
    }

    /// Score every node of `tree` in one pass. The node rows stay staged
    /// until [`TargetModel::commit_path`] or [`KvCache::rollback`].
    pub fn tree_verify_forward(&self, cache: &mut KvCache, tree: &TokenTree) -> Result<StagedOutput> {
        if tree.is_empty() {
            return Err(Error::InvalidTree("empty tree".into()));
        }
        self.forward_staged(cache, &tree.tokens(), &tree.parents())
    }

    /// Commit the accepted root-to-descendant `path` of a verified `tree`.
    pub fn commit_path(cache: &mut KvCache, tree: &TokenTree, path: &[usize]) -> Result<()> {
        if cache.staged_len() != tree.len() {
            return Err(Error::Cache(format!(
                "tree has {} nodes but {} rows are staged",
                tree.len(),
                cache.staged_len()
            )));
        }
        cache.commit_staged(path)
    }

    /// Every weight tensor under its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, &TensorF32)> {
        let mut out = vec![("tok_embedding".to_string(), &self.token_embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BlockWeights::NAMES.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut TensorF32)> {
        let mut out = vec![("tok_embedding".to_string(), &mut self.token_embedding)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BlockWeights::NAMES.iter().zip(b.tensors_mut()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    pub fn from_named(
        config: ModelConfig,
        mut take: impl FnMut(&str) -> Result<TensorF32>,
    ) -> Result<Self> {
        let token_embedding = take("tok_embedding")?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut get = |n: &str| take(&format!("blocks.{i}.{n}"));
            blocks.push(BlockWeights {
                attn_norm: get("attn_norm")?,
                wq: get("wq")?,
                wk: get("wk")?,
                wv: get("wv")?,
                wo: get("wo")?,
                mlp_norm: get("mlp_norm")?,
                w_gate: get("w_gate")?,
                w_up: get("w_up")?,
                w_down: get("w_down")?,
            });
        }
        let final_norm = take("final_norm")?;
        let lm_head = take("lm_head")?;
        Self::from_parts(config, token_embedding, blocks, final_norm, lm_head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmax;
    use crate::token_tree::TokenTree;

    fn tiny() -> TargetModel {
        let cfg = ModelConfig::new(2, 16, 2, 32, 24, 64).with_seed(11);
        TargetModel::random_with_std(cfg, 0.3).unwrap()
    }

    fn assert_close(a: &TensorF32, b: &TensorF32, tol: f32) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn prefill_single_token() {
        let m = tiny();
        let mut c = m.new_cache();
        m.prefill(&mut c, &[3]).unwrap();
        assert_eq!(c.committed_len(), 1);
    }

    #[test]
    fn prefill_equals_incremental_decode() {
        let m = tiny();
        let prompt = [1u32, 5, 9, 2, 7];
        let mut a = m.new_cache();
        let pre = m.prefill(&mut a, &prompt).unwrap();
        let mut b = m.new_cache();
        let mut last = m.prefill(&mut b, &prompt[..1]).unwrap();
        for &t in &prompt[1..] {
            last = m.decode_step(&mut b, t).unwrap();
        }
        assert_close(&pre.logits, &last.logits, 1e-5);
        assert_eq!(a, b);
    }

    #[test]
    fn decode_step_extends_prefill() {
        let m = tiny();
        let mut a = m.new_cache();
        m.prefill(&mut a, &[4, 8, 15]).unwrap();
        let step = m.decode_step(&mut a, 16).unwrap();
        assert_eq!(a.committed_len(), 4);
        let mut b = m.new_cache();
        let full = m.prefill(&mut b, &[4, 8, 15, 16]).unwrap();
        assert_close(&step.logits, &full.logits, 1e-5);
        // repeated runs are bit-identical
        let mut c = m.new_cache();
        m.prefill(&mut c, &[4, 8, 15]).unwrap();
        assert_eq!(m.decode_step(&mut c, 16).unwrap(), step);
    }

    #[test]
    fn context_changes_logits() {
        let m = tiny();
        let a = m.prefill(&mut m.new_cache(), &[1, 2, 3]).unwrap();
        let b = m.prefill(&mut m.new_cache(), &[9, 8, 3]).unwrap();
        assert_ne!(a.logits, b.logits);
    }

    #[test]
    fn single_node_tree_equals_decode_step() {
        let m = tiny();
        let mut a = m.new_cache();
        m.prefill(&mut a, &[2, 3]).unwrap();
        let mut b = a.clone();
        let step = m.decode_step(&mut a, 6).unwrap();
        let tree = TokenTree::merge_sequences(&[vec![6]]).unwrap();
        let out = m.tree_verify_forward(&mut b, &tree).unwrap();
        assert_eq!(out.logits.data(), step.logits.data());
        assert_eq!(out.hidden.data(), step.hidden.data());
    }

    #[test]
    fn branching_tree_matches_per_path_decoding() {
        let m = tiny();
        let prompt = [5u32, 1, 12];
        let mut base = m.new_cache();
        m.prefill(&mut base, &prompt).unwrap();
        let seqs = vec![vec![3u32, 4, 7], vec![3, 9], vec![11]];
        let tree = TokenTree::merge_sequences(&seqs).unwrap();
        let mut staged = base.clone();
        let out = m.tree_verify_forward(&mut staged, &tree).unwrap();
        assert_eq!(staged.committed_len(), 3);
        assert_eq!(staged.staged_len(), tree.len());
        for node in 0..tree.len() {
            let mut c = base.clone();
            let mut last = None;
            for n in tree.root_path(node) {
                last = Some(m.decode_step(&mut c, tree.node(n).token).unwrap());
            }
            assert_close(&TensorF32::vector(out.logits.row(node).to_vec()), &last.unwrap().logits, 1e-5);
        }
    }

    #[test]
    fn commit_chain_equals_sequential_cache() {
        let m = tiny();
        let mut a = m.new_cache();
        m.prefill(&mut a, &[7, 7]).unwrap();
        let mut b = a.clone();
        let tree = TokenTree::merge_sequences(&[vec![1, 2, 3]]).unwrap();
        m.tree_verify_forward(&mut a, &tree).unwrap();
        TargetModel::commit_path(&mut a, &tree, &[0, 1, 2]).unwrap();
        for t in [1, 2, 3] {
            m.decode_step(&mut b, t).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn commit_empty_path_restores_cache() {
        let m = tiny();
        let mut a = m.new_cache();
        m.prefill(&mut a, &[7, 1]).unwrap();
        let before = a.clone();
        let tree = TokenTree::merge_sequences(&[vec![1, 2], vec![3]]).unwrap();
        m.tree_verify_forward(&mut a, &tree).unwrap();
        TargetModel::commit_path(&mut a, &tree, &[]).unwrap();
        assert_eq!(a, before);
    }

    #[test]
    fn rejected_branch_leaves_no_trace() {
        let m = tiny();
        let mut a = m.new_cache();
        m.prefill(&mut a, &[2, 4, 6]).unwrap();
        let tree = TokenTree::merge_sequences(&[vec![1, 2], vec![3, 5]]).unwrap();
        m.tree_verify_forward(&mut a, &tree).unwrap();
        // left branch: nodes 0 -> 1
        TargetModel::commit_path(&mut a, &tree, &[0, 1]).unwrap();
        let after = m.decode_step(&mut a, 9).unwrap();
        let mut fresh = m.new_cache();
        m.prefill(&mut fresh, &[2, 4, 6, 1, 2]).unwrap();
        let want = m.decode_step(&mut fresh, 9).unwrap();
        assert_close(&after.logits, &want.logits, 1e-5);
    }

    #[test]
    fn overflow_and_bad_tokens() {
        let m = tiny();
        let mut c = m.new_cache();
        let long: Vec<u32> = vec![1; 65];
        assert!(matches!(m.prefill(&mut c, &long), Err(Error::MaxSeqOverflow { .. })));
        assert_eq!(c.staged_len(), 0);
        assert!(matches!(m.prefill(&mut c, &[99]), Err(Error::InvalidToken { .. })));
        assert!(m.prefill(&mut c, &[]).is_err());
    }

    #[test]
    fn stage_layout_mask_is_committed_plus_ancestors() {
        let layout = StageLayout::from_parents(2, &[None, Some(0), None, Some(1)]).unwrap();
        let mask = layout.mask().unwrap();
        assert_eq!(layout.positions, vec![2, 3, 2, 4]);
        assert_eq!(mask.row(3), &[true, true, true, true, false, true]);
        assert_eq!(mask.row(2), &[true, true, false, false, true, false]);
    }

    #[test]
    fn greedy_token_is_stable() {
        let m = tiny();
        let a = m.prefill(&mut m.new_cache(), &[1, 2]).unwrap();
        let b = m.prefill(&mut m.new_cache(), &[1, 2]).unwrap();
        assert_eq!(argmax(a.logits.data()), argmax(b.logits.data()));
    }
}
