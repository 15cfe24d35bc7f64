//! Inference path of the draft heads (f32).

use std::collections::HashMap;

use super::{DecoderKv, Regressive, SeqarWeights};
use crate::error::{Error, Result};
use crate::model::{block_forward, LayerKv, StageLayout, TargetModel};
use crate::numerics::{
    dot, log_softmax, matmul_into, normalize_slice, silu, top_k, TensorF32, NORM_EPS,
};
use crate::token_tree::{build_tree, Candidate, CandidateExpander, CandidateGrid, TokenTree};

/// Guards all-zero columns only, so outputs keep unit RMS to float precision.
const EMBED_EPS: f32 = 1e-12;

/// Column `token` of the LM head scaled to unit RMS.
pub fn embed_from_lm_head(model: &TargetModel, token: u32) -> Result<TensorF32> {
    model.check_token(token)?;
    let lm = model.lm_head();
    let (d, v) = (lm.rows(), lm.cols());
    let col: Vec<f32> = (0..d).map(|r| lm.data()[r * v + token as usize]).collect();
    let mut out = vec![0.0f32; d];
    normalize_slice(crate::numerics::NormKind::Rms, &col, &vec![1.0; d], EMBED_EPS, &mut out);
    Ok(TensorF32::vector(out))
}

/// `x [in] · w [in, out]`.
fn vec_mat(x: &[f32], w: &TensorF32) -> Vec<f32> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0f32; n];
    matmul_into(x, w.data(), 1, k, n, &mut out);
    out
}

/// Carried state of the regressive chain: hidden `h_i` plus the decoder's
/// key/value rows for this round (only kept in accumulate mode).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeculatorState {
    pub h: Vec<f32>,
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

impl SpeculatorState {
    pub fn new(h: Vec<f32>) -> Self {
        Self {
            h,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }
}

/// A target model paired with draft-head weights.
#[derive(Debug, Clone, Copy)]
pub struct Speculator<'a> {
    model: &'a TargetModel,
    weights: &'a SeqarWeights,
}

impl<'a> Speculator<'a> {
    pub fn new(model: &'a TargetModel, weights: &'a SeqarWeights) -> Result<Self> {
        weights.validate(model)?;
        Ok(Self { model, weights })
    }

    pub fn model(&self) -> &'a TargetModel {
        self.model
    }

    pub fn weights(&self) -> &'a SeqarWeights {
        self.weights
    }

    pub fn n_heads(&self) -> usize {
        self.weights.config.n_heads
    }

    /// LM head used by head `i`: its own matrix, or the target's when shared.
    pub fn lm_head(&self, i: usize) -> &'a TensorF32 {
        self.weights.heads[i].lm_head.as_ref().unwrap_or(self.model.lm_head())
    }

    fn norm(&self, x: &[f32], gain: &TensorF32) -> Vec<f32> {
        let mut out = vec![0.0f32; x.len()];
        normalize_slice(self.weights.config.norm_kind, x, gain.data(), NORM_EPS, &mut out);
        out
    }

    pub fn embed(&self, token: u32) -> Result<Vec<f32>> {
        Ok(embed_from_lm_head(self.model, token)?.into_data())
    }

    /// One regressive step from `state` with previous-token embedding `e`.
    pub fn decoder_step(&self, state: &SpeculatorState, e: &[f32]) -> SpeculatorState {
        let w = self.weights;
        match w.config.regressive {
            Regressive::None => state.clone(),
            Regressive::AttentionDecoder => {
                let dw = w.decoder.as_ref().expect("validated");
                let v = vec_mat(e, &dw.wv);
                match w.config.decoder_kv {
                    // softmax over a single key is exactly 1
                    DecoderKv::Single => SpeculatorState {
                        h: state.h.iter().zip(&v).map(|(a, b)| a + b).collect(),
                        keys: Vec::new(),
                        values: Vec::new(),
                    },
                    DecoderKv::Accumulate => {
                        let q = vec_mat(&self.norm(&state.h, &dw.norm), &dw.wq);
                        let k = vec_mat(e, &dw.wk);
                        let mut next = state.clone();
                        next.keys.push(k);
                        next.values.push(v);
                        let scale = 1.0 / (q.len() as f32).sqrt();
                        let mut scores: Vec<(usize, f32)> = next
                            .keys
                            .iter()
                            .enumerate()
                            .map(|(j, k)| (j, dot(&q, k) * scale))
                            .collect();
                        let mut att = vec![0.0f32; q.len()];
                        let values = &next.values;
                        crate::numerics::attend_row(&mut scores, |j| &values[j], &mut att);
                        for (h, a) in next.h.iter_mut().zip(&att) {
                            *h += a;
                        }
                        next
                    }
                }
            }
            Regressive::Mlp => {
                let m = w.mlp_regressive.as_ref().expect("validated");
                let mut x = self.norm(&state.h, &m.norm);
                x.extend_from_slice(e);
                let g = vec_mat(&x, &m.w_gate);
                let u = vec_mat(&x, &m.w_up);
                let a: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
                let out = vec_mat(&a, &m.w_down);
                SpeculatorState {
                    h: state.h.iter().zip(&out).map(|(a, b)| a + b).collect(),
                    keys: Vec::new(),
                    values: Vec::new(),
                }
            }
        }
    }

    /// Head `i`'s residual MLP applied to `h`.
    pub fn head_hidden(&self, i: usize, h: &[f32]) -> Vec<f32> {
        let hw = &self.weights.heads[i];
        let n = self.norm(h, &hw.norm);
        let g = vec_mat(&n, &hw.w_gate);
        let u = vec_mat(&n, &hw.w_up);
        let a: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
        let m = vec_mat(&a, &hw.w_down);
        h.iter().zip(&m).map(|(a, b)| a + b).collect()
    }

    /// Head `i`'s logits: final norm of the head output, then its LM head.
    pub fn head_forward(&self, i: usize, h: &[f32]) -> Result<Vec<f32>> {
        if i >= self.n_heads() {
            return Err(Error::InvalidConfig(format!("head {i} out of range")));
        }
        let z = self.head_hidden(i, h);
        let mut normed = vec![0.0f32; z.len()];
        normalize_slice(
            self.model.config().norm_kind,
            &z,
            self.model.final_norm().data(),
            NORM_EPS,
            &mut normed,
        );
        let logits = vec_mat(&normed, self.lm_head(i));
        if logits.iter().all(|v| v.is_finite()) {
            Ok(logits)
        } else {
            Err(Error::NonFinite { op: "head_forward" })
        }
    }

    /// `h_0` for every row of a fresh context `[n, d_model]`.
    pub fn h0_rows(&self, hiddens: &TensorF32) -> Result<TensorF32> {
        match self.weights.augment {
            Some(_) => AugmentState::default().push(self, hiddens),
            None => Ok(hiddens.clone()),
        }
    }

    pub fn new_stream(&self) -> SpecStream<'a> {
        SpecStream {
            spec: *self,
            augment: self.weights.augment.as_ref().map(|_| AugmentState::default()),
            h0: None,
        }
    }
}

/// The augmenting block's own key/value history over committed positions.
#[derive(Debug, Clone, Default)]
pub struct AugmentState {
    kv: LayerKv,
    len: usize,
}

impl AugmentState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Run the block over newly committed hidden rows, returning their
    /// augmented versions.
    pub fn push(&mut self, spec: &Speculator<'_>, rows: &TensorF32) -> Result<TensorF32> {
        let w = spec.weights();
        let block = w.augment.as_ref().expect("augment weights");
        let sub = w.config.augmenting.sublayers().expect("augmenting enabled");
        let n = rows.rows();
        let parents: Vec<Option<usize>> = (0..n).map(|i| i.checked_sub(1)).collect();
        let layout = StageLayout::from_parents(self.len, &parents)?;
        if self.len + n > spec.model().config().max_seq {
            return Err(Error::MaxSeqOverflow {
                needed: self.len + n,
                max_seq: spec.model().config().max_seq,
            });
        }
        let mut x = rows.clone();
        block_forward(block, spec.model().config(), spec.model().rope(), &mut x, &layout, &mut self.kv, sub)?;
        self.len += n;
        Ok(x)
    }
}

/// Per-stream draft state: augmenting history and the latest `h_0`.
#[derive(Debug, Clone)]
pub struct SpecStream<'a> {
    spec: Speculator<'a>,
    augment: Option<AugmentState>,
    h0: Option<Vec<f32>>,
}

/// Greedy top-1 chain of one round plus the per-head top-k recorded along it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecRound {
    pub grid: CandidateGrid,
    pub chain: Vec<u32>,
}

impl<'a> SpecStream<'a> {
    pub fn speculator(&self) -> &Speculator<'a> {
        &self.spec
    }

    /// Current `h_0` (augmented hidden of the last committed position).
    pub fn h0(&self) -> Option<&[f32]> {
        self.h0.as_deref()
    }

    /// Feed the target hiddens `[n, d_model]` of newly committed positions.
    pub fn on_commit(&mut self, hiddens: &TensorF32) -> Result<()> {
        let n = hiddens.rows();
        if n == 0 {
            return Ok(());
        }
        let last = match &mut self.augment {
            Some(aug) => aug.push(&self.spec, hiddens)?.row(n - 1).to_vec(),
            None => hiddens.row(n - 1).to_vec(),
        };
        self.h0 = Some(last);
        Ok(())
    }

    /// Expander for one round that starts from committed token `t0`.
    pub fn expander(&self, t0: u32) -> Result<RoundExpander<'a>> {
        let h0 = self
            .h0
            .clone()
            .ok_or(Error::Empty("speculator has seen no committed context"))?;
        Ok(RoundExpander::new(self.spec, h0, self.spec.embed(t0)?))
    }

    /// Follow every head's top-1 and record the top-k grid along the way.
    pub fn speculate_round(&self, t0: u32) -> Result<SpecRound> {
        let mut ex = self.expander(t0)?;
        let mut chain = Vec::new();
        let mut heads = Vec::new();
        for _ in 0..self.spec.n_heads() {
            let cands = ex.expand(&chain)?;
            chain.push(cands[0].token);
            heads.push(cands);
        }
        Ok(SpecRound {
            grid: CandidateGrid::new(heads)?,
            chain,
        })
    }

    /// Best-first token tree of at most `budget` speculated nodes.
    pub fn draft_tree(&self, t0: u32, budget: usize) -> Result<TokenTree> {
        let mut ex = self.expander(t0)?;
        build_tree(&mut ex, budget)
    }
}

/// Candidate source for tree building that re-runs the regressive chain per
/// expanded path, memoizing the chain state of each prefix.
pub struct RoundExpander<'a> {
    spec: Speculator<'a>,
    h0: Vec<f32>,
    e0: Vec<f32>,
    states: HashMap<Vec<u32>, SpeculatorState>,
    by_depth: Vec<Option<Vec<Candidate>>>,
}

impl<'a> RoundExpander<'a> {
    pub fn new(spec: Speculator<'a>, h0: Vec<f32>, e0: Vec<f32>) -> Self {
        let h = spec.n_heads();
        Self {
            spec,
            h0,
            e0,
            states: HashMap::new(),
            by_depth: vec![None; h],
        }
    }

    /// Chain state after the speculated tokens `path`: `h_{|path|+1}`.
    pub fn state(&mut self, path: &[u32]) -> Result<SpeculatorState> {
        if let Some(s) = self.states.get(path) {
            return Ok(s.clone());
        }
        let s = match path.split_last() {
            None => self.spec.decoder_step(&SpeculatorState::new(self.h0.clone()), &self.e0),
            Some((&last, prefix)) => {
                let prev = self.state(prefix)?;
                self.spec.decoder_step(&prev, &self.spec.embed(last)?)
            }
        };
        self.states.insert(path.to_vec(), s.clone());
        Ok(s)
    }

    fn candidates(&self, head: usize, h: &[f32]) -> Result<Vec<Candidate>> {
        let logits = self.spec.head_forward(head, h)?;
        let lp = log_softmax(&logits);
        Ok(top_k(&lp, self.spec.weights().config.top_k)
            .into_iter()
            .map(|(t, logprob)| Candidate {
                token: t as u32,
                logprob,
            })
            .collect())
    }

    /// Head logits for the position after `path`.
    pub fn logits(&mut self, path: &[u32]) -> Result<Vec<f32>> {
        let s = self.state(path)?;
        self.spec.head_forward(path.len(), &s.h)
    }
}

impl CandidateExpander for RoundExpander<'_> {
    fn expand(&mut self, path: &[u32]) -> Result<Vec<Candidate>> {
        let depth = path.len();
        if depth >= self.spec.n_heads() {
            return Ok(Vec::new());
        }
        if self.spec.weights().config.path_independent() {
            if let Some(c) = &self.by_depth[depth] {
                return Ok(c.clone());
            }
            let c = self.candidates(depth, &self.h0)?;
            self.by_depth[depth] = Some(c.clone());
            return Ok(c);
        }
        let s = self.state(path)?;
        self.candidates(depth, &s.h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Sublayers};
    use crate::numerics::{masked_attention, matmul, AttnMask};
    use crate::speculator::{Augmenting, SpeculatorConfig, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> TargetModel {
        TargetModel::random_with_std(ModelConfig::new(2, 16, 2, 32, 24, 64).with_seed(4), 0.3).unwrap()
    }

    fn randomize(w: &mut SeqarWeights, seed: u64, std: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in w.named_tensors_mut() {
            let shape = t.shape().to_vec();
            let noise = TensorF32::randn(&shape, std, &mut rng);
            *t = t.add(&noise).unwrap();
        }
    }

    fn stream_after<'a>(spec: &Speculator<'a>, m: &TargetModel, prompt: &[u32]) -> SpecStream<'a> {
        let mut cache = m.new_cache();
        let out = m.forward_staged(&mut cache, prompt, &(0..prompt.len()).map(|i| i.checked_sub(1)).collect::<Vec<_>>()).unwrap();
        let mut s = spec.new_stream();
        s.on_commit(&out.hidden).unwrap();
        s
    }

    #[test]
    fn embedding_has_unit_rms_and_matches_one_hot_matmul() {
        let m = model();
        let v = m.config().vocab_size;
        for t in 0..v as u32 {
            let e = embed_from_lm_head(&m, t).unwrap();
            let rms = (e.data().iter().map(|x| x * x).sum::<f32>() / e.len() as f32).sqrt();
            assert!((rms - 1.0).abs() < 1e-5);
            // oracle: lm_head · one_hot, then normalize
            let mut onehot = vec![0.0f32; v];
            onehot[t as usize] = 1.0;
            let col = matmul(m.lm_head(), &TensorF32::matrix(v, 1, onehot).unwrap()).unwrap();
            let ms = col.data().iter().map(|x| x * x).sum::<f32>() / col.len() as f32;
            let want: Vec<f32> = col.data().iter().map(|x| x * (1.0 / (ms + EMBED_EPS).sqrt())).collect();
            assert_eq!(e.data(), want.as_slice());
        }
        assert!(embed_from_lm_head(&m, v as u32).is_err());
    }

    #[test]
    fn embedding_is_scale_invariant_and_ones_stay_ones() {
        let cfg = ModelConfig::new(1, 4, 1, 8, 3, 8);
        let m0 = TargetModel::random(cfg.clone()).unwrap();
        let lm = TensorF32::new(vec![4, 3], vec![1.0, 2.0, 0.5, 1.0, 4.0, 0.5, 1.0, -2.0, 0.5, 1.0, 6.0, 0.5]).unwrap();
        let m = TargetModel::from_parts(cfg, m0.token_embedding().clone(), m0.blocks().to_vec(), m0.final_norm().clone(), lm).unwrap();
        let e0 = embed_from_lm_head(&m, 0).unwrap();
        for x in e0.data() {
            assert!((x - 1.0).abs() < 1e-5);
        }
        // column 2 is column 0 scaled by one half
        let e2 = embed_from_lm_head(&m, 2).unwrap();
        for (a, b) in e0.data().iter().zip(e2.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_v_decoder_is_identity() {
        let m = model();
        for kv in [DecoderKv::Single, DecoderKv::Accumulate] {
            let cfg = SpeculatorConfig { decoder_kv: kv, ..SpeculatorConfig::seqar(3) };
            let w = SeqarWeights::init(&m, cfg, 1).unwrap();
            let spec = Speculator::new(&m, &w).unwrap();
            let s0 = SpeculatorState::new((0..16).map(|i| i as f32 * 0.1 - 0.5).collect());
            let s1 = spec.decoder_step(&s0, &spec.embed(3).unwrap());
            let s2 = spec.decoder_step(&s1, &spec.embed(5).unwrap());
            assert_eq!(s1.h, s0.h);
            assert_eq!(s2.h, s0.h);
        }
    }

    #[test]
    fn single_mode_adds_value_projection_exactly() {
        let m = model();
        let mut w = SeqarWeights::init(&m, SpeculatorConfig::seqar(2), 1).unwrap();
        randomize(&mut w, 9, 0.5);
        let spec = Speculator::new(&m, &w).unwrap();
        let h: Vec<f32> = (0..16).map(|i| (i as f32).sin()).collect();
        let e = spec.embed(7).unwrap();
        let s = spec.decoder_step(&SpeculatorState::new(h.clone()), &e);
        let v = vec_mat(&e, &w.decoder.as_ref().unwrap().wv);
        let want: Vec<f32> = h.iter().zip(&v).map(|(a, b)| a + b).collect();
        assert_eq!(s.h, want);
    }

    #[test]
    fn accumulate_mode_matches_dense_attention() {
        let m = model();
        let cfg = SpeculatorConfig { decoder_kv: DecoderKv::Accumulate, ..SpeculatorConfig::seqar(2) };
        let mut w = SeqarWeights::init(&m, cfg, 1).unwrap();
        randomize(&mut w, 2, 0.4);
        let spec = Speculator::new(&m, &w).unwrap();
        let dw = w.decoder.as_ref().unwrap();
        let h0: Vec<f32> = (0..16).map(|i| (i as f32 * 0.3).cos()).collect();
        let (e0, e1) = (spec.embed(1).unwrap(), spec.embed(2).unwrap());
        let s1 = spec.decoder_step(&SpeculatorState::new(h0), &e0);
        let s2 = spec.decoder_step(&s1, &e1);
        // oracle: 1x2 dense attention with the second query
        let q = vec_mat(&spec.norm(&s1.h, &dw.norm), &dw.wq);
        let ks: Vec<f32> = [&e0, &e1].iter().flat_map(|e| vec_mat(e, &dw.wk)).collect();
        let vs: Vec<f32> = [&e0, &e1].iter().flat_map(|e| vec_mat(e, &dw.wv)).collect();
        let att = masked_attention(
            &TensorF32::matrix(1, 16, q).unwrap(),
            &TensorF32::matrix(2, 16, ks).unwrap(),
            &TensorF32::matrix(2, 16, vs).unwrap(),
            &AttnMask::full(1, 2).unwrap(),
        )
        .unwrap();
        for i in 0..16 {
            assert!((s2.h[i] - (s1.h[i] + att.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn no_augmenting_passes_hidden_through() {
        let m = model();
        let cfg = SpeculatorConfig { augmenting: Augmenting::None, ..SpeculatorConfig::seqar(2) };
        let w = SeqarWeights::init(&m, cfg, 1).unwrap();
        let spec = Speculator::new(&m, &w).unwrap();
        let mut s = spec.new_stream();
        let rows = TensorF32::matrix(2, 16, (0..32).map(|i| i as f32 * 0.01).collect()).unwrap();
        s.on_commit(&rows).unwrap();
        assert_eq!(s.h0().unwrap(), rows.row(1));
    }

    #[test]
    fn full_block_with_zero_output_projections_is_residual_only() {
        let m = model();
        let mut w = SeqarWeights::init(&m, SpeculatorConfig::seqar(2), 1).unwrap();
        let b = w.augment.as_mut().unwrap();
        b.wo = TensorF32::zeros(&[16, 16]);
        b.w_down = TensorF32::zeros(&[32, 16]);
        let spec = Speculator::new(&m, &w).unwrap();
        let mut s = spec.new_stream();
        let rows = TensorF32::matrix(3, 16, (0..48).map(|i| (i as f32).sin()).collect()).unwrap();
        s.on_commit(&rows).unwrap();
        assert_eq!(s.h0().unwrap(), rows.row(2));
    }

    #[test]
    fn attention_only_single_position_is_residual_plus_value() {
        let m = model();
        let cfg = SpeculatorConfig { augmenting: Augmenting::AttentionOnly, ..SpeculatorConfig::seqar(2) };
        let w = SeqarWeights::init(&m, cfg, 1).unwrap();
        assert_eq!(Augmenting::AttentionOnly.sublayers(), Some(Sublayers { attention: true, mlp: false }));
        let spec = Speculator::new(&m, &w).unwrap();
        let mut s = spec.new_stream();
        let h: Vec<f32> = (0..16).map(|i| (i as f32 * 0.7).cos()).collect();
        s.on_commit(&TensorF32::matrix(1, 16, h.clone()).unwrap()).unwrap();
        let b = w.augment.as_ref().unwrap();
        let mut n = vec![0.0f32; 16];
        normalize_slice(m.config().norm_kind, &h, b.attn_norm.data(), NORM_EPS, &mut n);
        let o = vec_mat(&vec_mat(&n, &b.wv), &b.wo);
        for i in 0..16 {
            assert!((s.h0().unwrap()[i] - (h[i] + o[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_init_heads_match_lm_head_of_h0() {
        let m = model();
        let w = SeqarWeights::init(&m, SpeculatorConfig::seqar(3), 1).unwrap();
        let spec = Speculator::new(&m, &w).unwrap();
        let s = stream_after(&spec, &m, &[1, 2, 3]);
        let h0 = s.h0().unwrap().to_vec();
        let mut normed = vec![0.0; 16];
        normalize_slice(m.config().norm_kind, &h0, m.final_norm().data(), NORM_EPS, &mut normed);
        let direct = vec_mat(&normed, m.lm_head());
        let mut ex = s.expander(4).unwrap();
        let mut path = Vec::new();
        for i in 0..3 {
            assert_eq!(ex.state(&path).unwrap().h, h0, "h_{} == h_0", i + 1);
            assert_eq!(ex.logits(&path).unwrap(), direct);
            path.push(i as u32);
        }
    }

    #[test]
    fn shared_lm_head_is_the_target_matrix() {
        let m = model();
        let w = SeqarWeights::init(&m, SpeculatorConfig::seqar(3), 1).unwrap();
        let spec = Speculator::new(&m, &w).unwrap();
        for i in 0..3 {
            assert!(std::ptr::eq(spec.lm_head(i), m.lm_head()));
            assert!(w.heads[i].lm_head.is_none());
        }
        let vocab = m.config().vocab_size;
        let vocab_sized = w.named_tensors().iter().filter(|(_, t)| t.shape().contains(&vocab)).count();
        assert_eq!(vocab_sized, 0);
        let med = SeqarWeights::init(&m, SpeculatorConfig::medusa(3), 1).unwrap();
        let spec = Speculator::new(&m, &med).unwrap();
        for i in 0..3 {
            assert!(std::ptr::eq(spec.lm_head(i), med.heads[i].lm_head.as_ref().unwrap()));
        }
    }

    #[test]
    fn one_head_round_is_one_step() {
        let m = model();
        let w = SeqarWeights::init(&m, SpeculatorConfig::seqar(1), 1).unwrap();
        let spec = Speculator::new(&m, &w).unwrap();
        let s = stream_after(&spec, &m, &[5]);
        let r = s.speculate_round(2).unwrap();
        assert_eq!(r.chain.len(), 1);
        assert_eq!(r.grid.n_heads(), 1);
    }

    #[test]
    fn medusa_heads_ignore_the_speculated_path() {
        let m = model();
        let mut w = SeqarWeights::init(&m, SpeculatorConfig::medusa(3), 1).unwrap();
        randomize(&mut w, 5, 0.3);
        let spec = Speculator::new(&m, &w).unwrap();
        let s = stream_after(&spec, &m, &[3, 1, 4]);
        let mut ex = s.expander(1).unwrap();
        let base = ex.expand(&[5, 9]).unwrap();
        for a in 0..24u32 {
            assert_eq!(ex.logits(&[a, 9]).unwrap(), ex.logits(&[5, 9]).unwrap());
            let mut fresh = s.expander(1).unwrap();
            assert_eq!(fresh.expand(&[a, 2]).unwrap(), base);
        }
    }

    #[test]
    fn seqar_heads_depend_on_the_speculated_path() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kv in [DecoderKv::Single, DecoderKv::Accumulate] {
            let cfg = SpeculatorConfig { decoder_kv: kv, ..SpeculatorConfig::seqar(3) };
            let mut w = SeqarWeights::init(&m, cfg, 1).unwrap();
            randomize(&mut w, 6, 0.3);
            let spec = Speculator::new(&m, &w).unwrap();
            let s = stream_after(&spec, &m, &[3, 1, 4]);
            let mut ex = s.expander(1).unwrap();
            let found = (0..100).any(|_| {
                let a = rng.random_range(0..24u32);
                let b = rng.random_range(0..24u32);
                a != b
                    && spec.embed(a).unwrap() != spec.embed(b).unwrap()
                    && ex.logits(&[a]).unwrap() != ex.logits(&[b]).unwrap()
            });
            assert!(found);
        }
    }

    #[test]
    fn medusa_equals_stripped_seqar_with_transplanted_weights() {
        let m = model();
        let mut med = SeqarWeights::init(&m, SpeculatorConfig::medusa(3), 1).unwrap();
        randomize(&mut med, 8, 0.3);
        let cfg = SpeculatorConfig {
            variant: Variant::Seqar,
            augmenting: Augmenting::None,
            regressive: Regressive::None,
            share_lm_head: false,
            ..SpeculatorConfig::seqar(3)
        };
        let stripped = SeqarWeights { config: cfg, ..med.clone() };
        let a = Speculator::new(&m, &med).unwrap();
        let b = Speculator::new(&m, &stripped).unwrap();
        let (sa, sb) = (stream_after(&a, &m, &[2, 7]), stream_after(&b, &m, &[2, 7]));
        assert_eq!(sa.speculate_round(3).unwrap(), sb.speculate_round(3).unwrap());
        assert_eq!(sa.draft_tree(3, 8).unwrap(), sb.draft_tree(3, 8).unwrap());
    }

    #[test]
    fn tree_nodes_follow_their_own_path_state() {
        let m = model();
        let mut w = SeqarWeights::init(&m, SpeculatorConfig::seqar(3), 1).unwrap();
        randomize(&mut w, 12, 0.3);
        let spec = Speculator::new(&m, &w).unwrap();
        let s = stream_after(&spec, &m, &[9, 9, 1]);
        let tree = s.draft_tree(6, 10).unwrap();
        for i in 0..tree.len() {
            let n = tree.node(i);
            let path = tree.path_tokens(i);
            let mut ex = s.expander(6).unwrap();
            let lp = log_softmax(&ex.logits(&path[..path.len() - 1]).unwrap());
            let parent_score = n.parent.map_or(0.0, |p| tree.node(p).score);
            assert!((n.score - (parent_score + lp[n.token as usize])).abs() < 1e-5);
        }
    }
}
