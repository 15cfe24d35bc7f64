//! Decode metrics, sweeps over batch size or tree budget, and head accuracy.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::engine::{run_batch, DecodeRequest, Speculators, StepTrace, Strategy};
use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::speculator::{RoundExpander, SeqarWeights, Speculator};
use crate::training::{AblationRow, Corpus};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeMetrics {
    pub total_tokens: usize,
    pub total_steps: usize,
    pub wall_seconds: f64,
    /// Tokens per step beyond the first.
    pub extra_tokens_per_step: f64,
    pub tokens_per_second: f64,
}

/// Aggregate step traces (from any number of requests) into run metrics.
pub fn compute_metrics(traces: &[StepTrace], wall_seconds: f64) -> Result<DecodeMetrics> {
    if traces.is_empty() {
        return Err(Error::Empty("metrics need at least one step"));
    }
    if !(wall_seconds > 0.0 && wall_seconds.is_finite()) {
        return Err(Error::InvalidConfig(format!("wall time must be positive, got {wall_seconds}")));
    }
    let total_tokens: usize = traces.iter().map(|t| t.tokens_emitted.len()).sum();
    let total_steps = traces.len();
    Ok(DecodeMetrics {
        total_tokens,
        total_steps,
        wall_seconds,
        extra_tokens_per_step: total_tokens as f64 / total_steps as f64 - 1.0,
        tokens_per_second: total_tokens as f64 / wall_seconds,
    })
}

str_enum! {
    pub enum SweepAxis {
        BatchSize => "batch_size",
        TreeBudget => "tree_budget",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Strictly ascending.
    pub values: Vec<usize>,
    pub repeats: usize,
    pub strategies: Vec<Strategy>,
    /// Requests per run on the tree-budget axis; the batch axis uses its value.
    pub n_prompts: usize,
    pub prompt_len: usize,
    pub max_new_tokens: usize,
    /// Budget used on the batch-size axis.
    pub tree_budget: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.values.is_empty() || self.values.contains(&0) {
            return bad("sweep values must be non-empty and positive");
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep values must be strictly ascending");
        }
        if self.repeats == 0 || self.n_prompts == 0 || self.prompt_len == 0 || self.max_new_tokens == 0 {
            return bad("repeats, n_prompts, prompt_len and max_new_tokens must be positive");
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub axis_value: usize,
    pub strategy: Strategy,
    pub repeat: usize,
    pub prompts_sha256: String,
    pub total_tokens: usize,
    pub total_steps: usize,
    pub extra_tokens_per_step: f64,
    pub tokens_per_second: f64,
    pub wall_seconds: f64,
}

/// `n` prompt windows of `len` tokens drawn from `corpus` with `seed`.
pub fn sample_prompts(corpus: &Corpus, n: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| corpus.sample_window(len, &mut rng).map(<[u32]>::to_vec))
        .collect()
}

/// SHA-256 over the prompt set (lengths and little-endian ids).
pub fn prompts_digest(prompts: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for p in prompts {
        h.update((p.len() as u64).to_le_bytes());
        for t in p {
            h.update(t.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One row per (axis value, repeat, strategy). Each repeat draws its prompts
/// from `seed + repeat`, so every strategy decodes the same prompt set.
pub fn run_sweep(model: &TargetModel, specs: &Speculators<'_>, corpus: &Corpus, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &value in &spec.values {
        for repeat in 0..spec.repeats {
            let (n, budget) = match spec.axis {
                SweepAxis::BatchSize => (value, spec.tree_budget),
                SweepAxis::TreeBudget => (spec.n_prompts, value),
            };
            let prompts = sample_prompts(corpus, n, spec.prompt_len, spec.seed + repeat as u64)?;
            let digest = prompts_digest(&prompts);
            for &strategy in &spec.strategies {
                let reqs: Vec<DecodeRequest> = prompts
                    .iter()
                    .map(|p| DecodeRequest::new(p.clone(), spec.max_new_tokens, strategy).with_budget(budget))
                    .collect();
                let out = run_batch(model, specs, &reqs)?;
                let traces: Vec<StepTrace> = out.outputs.iter().flat_map(|o| o.traces.iter().cloned()).collect();
                let m = compute_metrics(&traces, out.wall_seconds.max(f64::MIN_POSITIVE))?;
                rows.push(SweepRow {
                    axis: spec.axis,
                    axis_value: value,
                    strategy,
                    repeat,
                    prompts_sha256: digest.clone(),
                    total_tokens: m.total_tokens,
                    total_steps: m.total_steps,
                    extra_tokens_per_step: m.extra_tokens_per_step,
                    tokens_per_second: m.tokens_per_second,
                    wall_seconds: m.wall_seconds,
                });
            }
        }
    }
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("csv: {other:?}")),
    }
}

#[derive(Serialize)]
struct CountRow<'a> {
    axis: SweepAxis,
    axis_value: usize,
    strategy: Strategy,
    repeat: usize,
    prompts_sha256: &'a str,
    total_tokens: usize,
    total_steps: usize,
    extra_tokens_per_step: f64,
}

/// Full rows, timings included.
pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    write_csv(path.as_ref(), rows)
}

/// Token counts only: reproducible byte-for-byte for a fixed config and seed.
pub fn write_counts_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    write_csv(
        path.as_ref(),
        rows.iter().map(|r| CountRow {
            axis: r.axis,
            axis_value: r.axis_value,
            strategy: r.strategy,
            repeat: r.repeat,
            prompts_sha256: &r.prompts_sha256,
            total_tokens: r.total_tokens,
            total_steps: r.total_steps,
            extra_tokens_per_step: r.extra_tokens_per_step,
        }),
    )
}

/// `variant,head,k,accuracy`
pub fn write_accuracy_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    write_csv(path.as_ref(), rows)
}

/// Mean over repeats per (axis value, strategy), as a markdown table.
pub fn render_report(rows: &[SweepRow]) -> String {
    let mut keys: Vec<(usize, Strategy)> = rows.iter().map(|r| (r.axis_value, r.strategy)).collect();
    keys.dedup();
    keys.sort_by_key(|&(v, s)| (v, s.as_str()));
    keys.dedup();
    let axis = rows.first().map_or("value", |r| r.axis.as_str());
    let mut out = format!(
        "| {axis} | strategy | extra tokens/step | tokens/step | tokens/s |\n|---|---|---|---|---|\n"
    );
    for (v, s) in keys {
        let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.axis_value == v && r.strategy == s).collect();
        let n = sel.len() as f64;
        let extra = sel.iter().map(|r| r.extra_tokens_per_step).sum::<f64>() / n;
        let tps = sel.iter().map(|r| r.tokens_per_second).sum::<f64>() / n;
        out.push_str(&format!("| {v} | {s} | {extra:.3} | {:.3} | {tps:.1} |\n", extra + 1.0));
    }
    out.push_str(
        "\nTokens/step depends only on the weights and prompts. Tokens/s is CPU wall-clock \
         on this machine and is not comparable with accelerator throughput figures.\n",
    );
    out
}

pub fn write_report(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_report(rows).as_bytes())?;
    Ok(())
}

/// Teacher-forced top-k hit rates per head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadAccuracy {
    pub ks: Vec<usize>,
    /// `[head][k index]`
    pub accuracy: Vec<Vec<f64>>,
    pub hits: Vec<Vec<usize>>,
    /// Positions scored per head.
    pub positions: Vec<usize>,
}

impl HeadAccuracy {
    /// Accuracy of 0-based `head` at `k`, if `k` was evaluated.
    pub fn get(&self, head: usize, k: usize) -> Option<f64> {
        let ki = self.ks.iter().position(|&x| x == k)?;
        self.accuracy.get(head).map(|row| row[ki])
    }
}

/// Rank of `target` under the ordering used by `top_k`.
fn rank_of(logits: &[f32], target: usize) -> usize {
    let t = logits[target];
    logits
        .iter()
        .enumerate()
        .filter(|&(i, v)| v.total_cmp(&t).then(target.cmp(&i)).is_gt())
        .count()
}

/// For every non-overlapping window of `seq_len` tokens in `split` and every
/// position `p` with ground truth at `p + 2 + j`, head `j` scores a hit at `k`
/// when that token is among its top `k` logits. The chain is fed the true
/// tokens, using the inference code path.
pub fn head_accuracy_eval(
    model: &TargetModel,
    weights: &SeqarWeights,
    split: &Corpus,
    seq_len: usize,
    ks: &[usize],
) -> Result<HeadAccuracy> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("ks must be non-empty and positive".into()));
    }
    let spec = Speculator::new(model, weights)?;
    let n_heads = spec.n_heads();
    let mut hits = vec![vec![0usize; ks.len()]; n_heads];
    let mut positions = vec![0usize; n_heads];
    let mut any = false;
    for window in split.windows(seq_len) {
        if window.len() < 3 {
            continue;
        }
        any = true;
        let out = model.prefill_rows(&mut model.new_cache(), window)?;
        let h0 = spec.h0_rows(&out.hidden)?;
        for p in 0..window.len() - 2 {
            let mut ex = RoundExpander::new(spec, h0.row(p).to_vec(), spec.embed(window[p + 1])?);
            for j in 0..n_heads {
                let Some(&truth) = window.get(p + 2 + j) else { break };
                let logits = ex.logits(&window[p + 2..p + 2 + j])?;
                let r = rank_of(&logits, truth as usize);
                positions[j] += 1;
                for (ki, &k) in ks.iter().enumerate() {
                    if r < k {
                        hits[j][ki] += 1;
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::Empty("evaluation split is shorter than one window"));
    }
    let accuracy = hits
        .iter()
        .zip(&positions)
        .map(|(h, &n)| h.iter().map(|&x| if n == 0 { 0.0 } else { x as f64 / n as f64 }).collect())
        .collect();
    Ok(HeadAccuracy {
        ks: ks.to_vec(),
        accuracy,
        hits,
        positions,
    })
}
