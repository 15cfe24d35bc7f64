//! Decode loops: vanilla greedy and speculative (draft, verify, accept, commit).
//!
//! Every strategy emits exactly the vanilla greedy sequence. The speculative
//! loop only changes how many target forwards that takes.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::numerics::{argmax, TensorF32};
use crate::speculator::{SpecStream, Speculator};
use crate::token_tree::{longest_accepted_path, TokenTree};

str_enum! {
    pub enum Strategy {
        Vanilla => "vanilla",
        Medusa => "medusa",
        Seqar => "seqar",
    }
}

pub const DEFAULT_TREE_BUDGET: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub prompt: Vec<u32>,
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    pub tree_budget: usize,
    #[serde(default)]
    pub stop_tokens: BTreeSet<u32>,
}

impl DecodeRequest {
    pub fn new(prompt: Vec<u32>, max_new_tokens: usize, strategy: Strategy) -> Self {
        Self {
            prompt,
            max_new_tokens,
            strategy,
            tree_budget: DEFAULT_TREE_BUDGET,
            stop_tokens: BTreeSet::new(),
        }
    }

    pub fn with_budget(mut self, tree_budget: usize) -> Self {
        self.tree_budget = tree_budget;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Empty("prompt must be non-empty"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        if self.strategy != Strategy::Vanilla && self.tree_budget == 0 {
            return Err(Error::InvalidConfig("tree_budget must be >= 1".into()));
        }
        Ok(())
    }
}

/// One engine step. The prefill counts as step 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step_index: usize,
    pub tokens_emitted: Vec<u32>,
    /// Speculated nodes verified this step (0 for vanilla and the prefill).
    pub tree_size_used: usize,
    /// Emitted tokens beyond the first.
    pub accepted_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub traces: Vec<StepTrace>,
    pub wall_seconds: f64,
}

/// Source of draft trees for the speculative loop.
pub trait Drafter {
    /// Target hidden states `[n, d_model]` of the rows just committed.
    fn on_commit(&mut self, hiddens: &TensorF32) -> Result<()>;
    /// At most `budget` speculated nodes continuing after `t0`, the target's
    /// committed-but-not-yet-fed next token.
    fn draft(&mut self, t0: u32, budget: usize) -> Result<TokenTree>;
}

impl Drafter for SpecStream<'_> {
    fn on_commit(&mut self, hiddens: &TensorF32) -> Result<()> {
        SpecStream::on_commit(self, hiddens)
    }

    fn draft(&mut self, t0: u32, budget: usize) -> Result<TokenTree> {
        self.draft_tree(t0, budget)
    }
}

/// Truncates emission at `max_new_tokens` and after the first stop token.
struct Emitter<'r> {
    req: &'r DecodeRequest,
    tokens: Vec<u32>,
    traces: Vec<StepTrace>,
    done: bool,
}

impl<'r> Emitter<'r> {
    fn new(req: &'r DecodeRequest) -> Self {
        Self {
            req,
            tokens: Vec::new(),
            traces: Vec::new(),
            done: false,
        }
    }

    fn step(&mut self, proposed: &[u32], tree_size_used: usize) {
        let mut emitted = Vec::with_capacity(proposed.len());
        for &t in proposed {
            emitted.push(t);
            if self.tokens.len() + emitted.len() >= self.req.max_new_tokens || self.req.stop_tokens.contains(&t) {
                self.done = true;
                break;
            }
        }
        self.tokens.extend_from_slice(&emitted);
        self.traces.push(StepTrace {
            step_index: self.traces.len(),
            accepted_length: emitted.len() - 1,
            tokens_emitted: emitted,
            tree_size_used,
        });
    }

    fn finish(self, start: Instant) -> DecodeOutput {
        DecodeOutput {
            tokens: self.tokens,
            traces: self.traces,
            wall_seconds: start.elapsed().as_secs_f64(),
        }
    }
}

/// Plain greedy decoding with the KV cache.
pub fn run_vanilla(model: &TargetModel, req: &DecodeRequest) -> Result<DecodeOutput> {
    req.validate()?;
    let start = Instant::now();
    let mut cache = model.new_cache();
    let mut em = Emitter::new(req);
    let out = model.prefill(&mut cache, &req.prompt)?;
    let mut t = argmax(out.logits.data()) as u32;
    em.step(&[t], 0);
    while !em.done {
        let out = model.decode_step(&mut cache, t)?;
        t = argmax(out.logits.data()) as u32;
        em.step(&[t], 0);
    }
    Ok(em.finish(start))
}

/// Speculative greedy decoding with tree verification.
pub fn run_speculative(model: &TargetModel, drafter: &mut dyn Drafter, req: &DecodeRequest) -> Result<DecodeOutput> {
    req.validate()?;
    let start = Instant::now();
    let max_seq = model.config().max_seq;
    let mut cache = model.new_cache();
    let mut em = Emitter::new(req);

    let pre = model.prefill_rows(&mut cache, &req.prompt)?;
    drafter.on_commit(&pre.hidden)?;
    let mut t0 = argmax(pre.logits.row(req.prompt.len() - 1)) as u32;
    em.step(&[t0], 0);

    while !em.done {
        let committed = cache.committed_len();
        if committed + 1 > max_seq {
            return Err(Error::MaxSeqOverflow {
                needed: committed + 1,
                max_seq,
            });
        }
        // the verify tree is t0 plus the draft, and all of it must fit in the cache
        let budget = req.tree_budget.min(max_seq - committed - 1);
        let draft = if budget > 0 {
            drafter.draft(t0, budget)?
        } else {
            TokenTree::default()
        };
        if draft.len() > budget {
            return Err(Error::InvalidTree(format!(
                "drafter returned {} nodes for a budget of {budget}",
                draft.len()
            )));
        }
        let tree = draft.with_root(t0);
        let out = model.tree_verify_forward(&mut cache, &tree)?;
        let verdicts: Vec<u32> = (0..tree.len()).map(|i| argmax(out.logits.row(i)) as u32).collect();
        let path = longest_accepted_path(&tree, t0, &verdicts);
        let last = *path.last().expect("root always matches its own verdict");
        let mut proposed: Vec<u32> = path[1..].iter().map(|&n| tree.node(n).token).collect();
        let bonus = verdicts[last];
        proposed.push(bonus);

        TargetModel::commit_path(&mut cache, &tree, &path)?;
        let rows: Vec<&[f32]> = path.iter().map(|&n| out.hidden.row(n)).collect();
        drafter.on_commit(&TensorF32::from_rows(&rows)?)?;

        em.step(&proposed, draft.len());
        t0 = bonus;
    }
    Ok(em.finish(start))
}

/// Trained draft heads available to a run, one per speculative strategy.
#[derive(Debug, Clone, Copy, Default)]
pub struct Speculators<'a> {
    pub medusa: Option<Speculator<'a>>,
    pub seqar: Option<Speculator<'a>>,
}

/// Run one request with the strategy it names.
pub fn run_request(model: &TargetModel, specs: &Speculators<'_>, req: &DecodeRequest) -> Result<DecodeOutput> {
    let spec = match req.strategy {
        Strategy::Vanilla => return run_vanilla(model, req),
        Strategy::Medusa => specs.medusa,
        Strategy::Seqar => specs.seqar,
    };
    let spec = spec.ok_or_else(|| {
        Error::InvalidConfig(format!("strategy {} needs trained {} heads", req.strategy, req.strategy))
    })?;
    let mut stream = spec.new_stream();
    run_speculative(model, &mut stream, req)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutput {
    pub outputs: Vec<DecodeOutput>,
    /// Wall time around the whole batch.
    pub wall_seconds: f64,
}

/// Worker count: `SEQAR_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("SEQAR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Decode independent streams concurrently over shared immutable weights.
pub fn run_batch(model: &TargetModel, specs: &Speculators<'_>, reqs: &[DecodeRequest]) -> Result<BatchOutput> {
    if reqs.is_empty() {
        return Err(Error::Empty("batch must contain at least one request"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads().min(reqs.len()))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let outputs: Result<Vec<DecodeOutput>> =
        pool.install(|| reqs.par_iter().map(|r| run_request(model, specs, r)).collect());
    Ok(BatchOutput {
        outputs: outputs?,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::speculator::{DecoderKv, SeqarWeights, SpeculatorConfig};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> TargetModel {
        TargetModel::random_with_std(ModelConfig::new(2, 16, 2, 32, 12, 96).with_seed(seed), 0.5).unwrap()
    }

    /// Re-runs the full sequence from scratch for every token.
    fn no_cache_greedy(m: &TargetModel, prompt: &[u32], n: usize) -> Vec<u32> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..n {
            let step = m.prefill(&mut m.new_cache(), &seq).unwrap();
            let t = argmax(step.logits.data()) as u32;
            out.push(t);
            seq.push(t);
        }
        out
    }

    struct OracleDrafter {
        full: Vec<u32>,
        committed: usize,
    }

    impl Drafter for OracleDrafter {
        fn on_commit(&mut self, hiddens: &TensorF32) -> Result<()> {
            self.committed += hiddens.rows();
            Ok(())
        }
        fn draft(&mut self, _t0: u32, budget: usize) -> Result<TokenTree> {
            let from = (self.committed + 1).min(self.full.len());
            let to = (from + budget).min(self.full.len());
            if from == to {
                return Ok(TokenTree::default());
            }
            TokenTree::merge_sequences(&[self.full[from..to].to_vec()])
        }
    }

    struct GarbageDrafter(u32);

    impl Drafter for GarbageDrafter {
        fn on_commit(&mut self, _: &TensorF32) -> Result<()> {
            Ok(())
        }
        fn draft(&mut self, _t0: u32, budget: usize) -> Result<TokenTree> {
            TokenTree::merge_sequences(&[vec![self.0; budget]])
        }
    }

    fn random_heads(m: &TargetModel, cfg: SpeculatorConfig, seed: u64) -> SeqarWeights {
        let mut w = SeqarWeights::init(m, cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in w.named_tensors_mut() {
            let shape = t.shape().to_vec();
            *t = t.add(&TensorF32::randn(&shape, 0.3, &mut rng)).unwrap();
        }
        w
    }

    #[test]
    fn one_token_is_prefill_argmax() {
        let m = model(1);
        let out = run_vanilla(&m, &DecodeRequest::new(vec![3, 4], 1, Strategy::Vanilla)).unwrap();
        let want = argmax(m.prefill(&mut m.new_cache(), &[3, 4]).unwrap().logits.data()) as u32;
        assert_eq!(out.tokens, vec![want]);
        assert_eq!(out.traces.len(), 1);
    }

    #[test]
    fn vanilla_matches_no_cache_oracle_and_is_deterministic() {
        for seed in 0..5 {
            let m = model(seed);
            let req = DecodeRequest::new(vec![1, 2, 3], 20, Strategy::Vanilla);
            let a = run_vanilla(&m, &req).unwrap();
            assert_eq!(a.tokens, no_cache_greedy(&m, &[1, 2, 3], 20));
            assert_eq!(run_vanilla(&m, &req).unwrap().tokens, a.tokens);
            assert!(a.traces.iter().all(|t| t.accepted_length == 0));
        }
    }

    #[test]
    fn oracle_drafter_accepts_everything() {
        let m = model(3);
        let prompt = vec![5, 1];
        let van = run_vanilla(&m, &DecodeRequest::new(prompt.clone(), 30, Strategy::Vanilla)).unwrap();
        let mut full = prompt.clone();
        full.extend(&van.tokens);
        let mut d = OracleDrafter { full, committed: 0 };
        let req = DecodeRequest::new(prompt, 30, Strategy::Seqar).with_budget(4);
        let out = run_speculative(&m, &mut d, &req).unwrap();
        assert_eq!(out.tokens, van.tokens);
        // 1 (prefill) + 29 tokens at 5 per step
        assert_eq!(out.traces.len(), 1 + 6);
        assert!(out.traces[1..6].iter().all(|t| t.accepted_length == 4));
    }

    #[test]
    fn garbage_drafter_accepts_nothing() {
        let m = model(4);
        let req = DecodeRequest::new(vec![2, 2, 7], 25, Strategy::Seqar).with_budget(3);
        let van = run_vanilla(&m, &req).unwrap();
        let mut d = GarbageDrafter(11);
        let out = run_speculative(&m, &mut d, &req).unwrap();
        assert_eq!(out.tokens, van.tokens);
        let steps_with_garbage_rejected = out.traces.iter().filter(|t| t.accepted_length == 0).count();
        // token 11 may legitimately be the greedy choice sometimes
        if !van.tokens.contains(&11) {
            assert_eq!(steps_with_garbage_rejected, out.traces.len());
        }
    }

    #[test]
    fn stop_tokens_truncate_identically() {
        let m = model(6);
        let base = DecodeRequest::new(vec![1, 9], 40, Strategy::Vanilla);
        let van = run_vanilla(&m, &base).unwrap();
        let stop = van.tokens[7];
        let mut req = base.clone();
        req.stop_tokens.insert(stop);
        let van_stop = run_vanilla(&m, &req).unwrap();
        let cut = van.tokens.iter().position(|&t| t == stop).unwrap();
        assert_eq!(van_stop.tokens, van.tokens[..=cut]);
        let mut full = vec![1, 9];
        full.extend(&van.tokens);
        let mut d = OracleDrafter { full, committed: 0 };
        req.strategy = Strategy::Seqar;
        let spec = run_speculative(&m, &mut d, &req).unwrap();
        assert_eq!(spec.tokens, van_stop.tokens);
        for t in &spec.traces {
            assert_eq!(t.tokens_emitted.len(), t.accepted_length + 1);
        }
    }

    #[test]
    fn max_seq_overflow_matches_vanilla() {
        let m = model(2);
        // max_seq 96: prompt 90 leaves room for exactly 7 tokens
        let prompt: Vec<u32> = (0..90).map(|i| i % 12).collect();
        let ok = DecodeRequest::new(prompt.clone(), 7, Strategy::Vanilla);
        let van = run_vanilla(&m, &ok).unwrap();
        let mut full = prompt.clone();
        full.extend(&van.tokens);
        let req = DecodeRequest { strategy: Strategy::Seqar, tree_budget: 8, ..ok.clone() };
        let spec = run_speculative(&m, &mut OracleDrafter { full, committed: 0 }, &req).unwrap();
        assert_eq!(spec.tokens, van.tokens);
        let too_long = DecodeRequest { max_new_tokens: 8, ..ok };
        assert!(matches!(run_vanilla(&m, &too_long), Err(Error::MaxSeqOverflow { .. })));
        let req = DecodeRequest { strategy: Strategy::Seqar, ..too_long };
        assert!(matches!(
            run_speculative(&m, &mut GarbageDrafter(0), &req),
            Err(Error::MaxSeqOverflow { .. })
        ));
    }

    #[test]
    fn budget_one_speculates_one_token() {
        let m = model(8);
        let w = random_heads(&m, SpeculatorConfig::seqar(3), 2);
        let spec = Speculator::new(&m, &w).unwrap();
        let req = DecodeRequest::new(vec![4, 4], 30, Strategy::Seqar).with_budget(1);
        let out = run_request(&m, &Speculators { seqar: Some(spec), medusa: None }, &req).unwrap();
        assert!(out.traces[1..].iter().all(|t| t.tree_size_used == 1 && t.accepted_length <= 1));
        assert_eq!(out.tokens, run_vanilla(&m, &req).unwrap().tokens);
    }

    #[test]
    fn batch_matches_solo_runs() {
        let m = model(9);
        let med = random_heads(&m, SpeculatorConfig::medusa(3), 3);
        let seq = random_heads(&m, SpeculatorConfig::seqar(3), 4);
        let specs = Speculators {
            medusa: Some(Speculator::new(&m, &med).unwrap()),
            seqar: Some(Speculator::new(&m, &seq).unwrap()),
        };
        let reqs: Vec<DecodeRequest> = (0..8)
            .map(|i| DecodeRequest::new(vec![i as u32 % 12, 3], 16, Strategy::ALL[i % 3]).with_budget(1 + i))
            .collect();
        let batch = run_batch(&m, &specs, &reqs).unwrap();
        for (r, o) in reqs.iter().zip(&batch.outputs) {
            let solo = run_request(&m, &specs, r).unwrap();
            assert_eq!(o.tokens, solo.tokens);
            assert_eq!(o.traces, solo.traces);
        }
        let one = run_batch(&m, &specs, &reqs[..1]).unwrap();
        assert_eq!(one.outputs[0].tokens, batch.outputs[0].tokens);
        assert!(run_batch(&m, &specs, &[]).is_err());
    }

    #[test]
    fn missing_heads_is_config_error() {
        let m = model(1);
        let req = DecodeRequest::new(vec![1], 4, Strategy::Medusa);
        assert!(matches!(run_request(&m, &Speculators::default(), &req), Err(Error::InvalidConfig(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn speculative_equals_vanilla(
            seed in 0u64..1000,
            budget in 1usize..10,
            accumulate in any::<bool>(),
            medusa in any::<bool>(),
            prompt_len in 1usize..6,
        ) {
            let m = model(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            let prompt: Vec<u32> = (0..prompt_len).map(|_| rng.random_range(0..12)).collect();
            let mut cfg = if medusa { SpeculatorConfig::medusa(3) } else { SpeculatorConfig::seqar(3) };
            if accumulate {
                cfg.decoder_kv = DecoderKv::Accumulate;
            }
            let w = random_heads(&m, cfg, seed);
            let spec = Speculator::new(&m, &w).unwrap();
            let req = DecodeRequest::new(prompt, 24, Strategy::Seqar).with_budget(budget);
            let out = run_speculative(&m, &mut spec.new_stream(), &req).unwrap();
            prop_assert_eq!(&out.tokens, &run_vanilla(&m, &req).unwrap().tokens);
            let total: usize = out.traces.iter().map(|t| t.tokens_emitted.len()).sum();
            prop_assert_eq!(total, out.tokens.len());
            for t in &out.traces {
                prop_assert!(t.accepted_length <= 3);
                prop_assert_eq!(t.tokens_emitted.len(), t.accepted_length + 1);
            }
        }
    }
}
