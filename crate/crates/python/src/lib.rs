//! Python bindings: target models, draft heads, training, decoding, token
//! trees and metrics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use seqar::bench::{self, DecodeMetrics};
use seqar::engine::{self, DecodeRequest, Speculators, StepTrace, Strategy};
use seqar::model::{self, ModelConfig};
use seqar::speculator::{self, Augmenting, DecoderKv, Regressive, SeqarWeights, Speculator, SpeculatorConfig, Variant};
use seqar::token_tree;
use seqar::training::{self, Corpus, TrainConfig};
use seqar::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite { .. } | Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

/// A frozen decoder-only target model.
#[pyclass(frozen)]
struct TargetModel {
    inner: model::TargetModel,
}

#[pymethods]
impl TargetModel {
    /// Seeded random weights.
    #[staticmethod]
    #[pyo3(signature = (layers=2, d_model=32, n_heads=2, d_ff=64, vocab=32, max_seq=160, seed=0, std=0.02))]
    #[allow(clippy::too_many_arguments)]
    fn random(
        layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab: usize,
        max_seq: usize,
        seed: u64,
        std: f32,
    ) -> PyResult<Self> {
        let cfg = ModelConfig::new(layers, d_model, n_heads, d_ff, vocab, max_seq).with_seed(seed);
        let inner = model::TargetModel::random_with_std(cfg, std).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Load a checkpoint bundle; returns the model and its heads, if any.
    #[staticmethod]
    fn load(path: &str) -> PyResult<(Self, Option<Heads>)> {
        let (inner, heads) = speculator::load_bundle(path).map_err(py_err)?;
        Ok((Self { inner }, heads.map(|inner| Heads { inner })))
    }

    #[pyo3(signature = (path, heads=None))]
    fn save(&self, path: &str, heads: Option<&Heads>) -> PyResult<()> {
        speculator::save_bundle(path, &self.inner, heads.map(|h| &h.inner)).map_err(py_err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config().to_kv().render()
    }

    /// Next-token logits after `tokens`, one list per position.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        let mut cache = self.inner.new_cache();
        let out = self.inner.prefill_rows(&mut cache, &tokens).map_err(py_err)?;
        Ok((0..tokens.len()).map(|i| out.logits.row(i).to_vec()).collect())
    }
}

/// Trained or freshly initialized draft heads for one target model.
#[pyclass(frozen)]
struct Heads {
    inner: SeqarWeights,
}

#[pymethods]
impl Heads {
    /// Training-start weights for `variant` ("seqar" or "medusa").
    #[staticmethod]
    #[pyo3(signature = (model, variant="seqar", n_heads=3, top_k=4, decoder_kv="single", augmenting=None, regressive=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn init(
        model: &TargetModel,
        variant: &str,
        n_heads: usize,
        top_k: usize,
        decoder_kv: &str,
        augmenting: Option<&str>,
        regressive: Option<&str>,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = spec_config(variant, n_heads, top_k, decoder_kv, augmenting, regressive)?;
        let inner = SeqarWeights::init(&model.inner, cfg, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_kv().render()
    }

    #[getter]
    fn tensor_names(&self) -> Vec<String> {
        self.inner.named_tensors().into_iter().map(|(n, _)| n).collect()
    }
}

fn spec_config(
    variant: &str,
    n_heads: usize,
    top_k: usize,
    decoder_kv: &str,
    augmenting: Option<&str>,
    regressive: Option<&str>,
) -> PyResult<SpeculatorConfig> {
    let mut cfg = SpeculatorConfig::for_variant(parse::<Variant>(variant)?, n_heads);
    cfg.top_k = top_k;
    cfg.decoder_kv = parse::<DecoderKv>(decoder_kv)?;
    if let Some(a) = augmenting {
        cfg.augmenting = parse::<Augmenting>(a)?;
    }
    if let Some(r) = regressive {
        cfg.regressive = parse::<Regressive>(r)?;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn train_config(steps: usize, lr: f64, batch_size: usize, seq_len: usize, seed: u64) -> PyResult<TrainConfig> {
    let cfg = TrainConfig {
        steps,
        lr,
        batch_size,
        seq_len,
        seed,
        ..Default::default()
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// The synthetic bracketed-grammar corpus (vocabulary 32).
#[pyfunction]
#[pyo3(signature = (length, seed=0))]
fn grammar_corpus(length: usize, seed: u64) -> Vec<u32> {
    Corpus::grammar(length, seed).tokens
}

/// Train a fresh target model with the next-token loss. Returns the model
/// and the per-step losses.
#[pyfunction]
#[pyo3(signature = (tokens, vocab, layers=2, d_model=32, n_heads=2, d_ff=64, max_seq=160, steps=300, lr=3e-3, batch_size=8, seq_len=32, seed=0))]
#[allow(clippy::too_many_arguments)]
fn pretrain_target(
    py: Python<'_>,
    tokens: Vec<u32>,
    vocab: usize,
    layers: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    max_seq: usize,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
) -> PyResult<(TargetModel, Vec<f64>)> {
    let corpus = Corpus::new(vocab, tokens).map_err(py_err)?;
    let mcfg = ModelConfig::new(layers, d_model, n_heads, d_ff, vocab, max_seq).with_seed(seed);
    let tcfg = train_config(steps, lr, batch_size, seq_len, seed)?;
    let (inner, losses) = py
        .detach(|| training::pretrain_target(mcfg, &tcfg, &corpus))
        .map_err(py_err)?;
    Ok((TargetModel { inner }, losses))
}

/// Train draft heads on a frozen target. Returns the heads, the per-step
/// losses and the held-out `{"top1": [...], "top5": [...]}` accuracy per head.
#[pyfunction]
#[pyo3(signature = (model, tokens, variant="seqar", n_heads=3, steps=300, lr=3e-3, batch_size=8, seq_len=32, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_heads<'py>(
    py: Python<'py>,
    model: &TargetModel,
    tokens: Vec<u32>,
    variant: &str,
    n_heads: usize,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
) -> PyResult<(Heads, Vec<f64>, Bound<'py, PyDict>)> {
    let corpus = Corpus::new(model.inner.config().vocab_size, tokens).map_err(py_err)?;
    let spec = spec_config(variant, n_heads, speculator::DEFAULT_TOP_K, "single", None, None)?;
    let tcfg = train_config(steps, lr, batch_size, seq_len, seed)?;
    let run = py
        .detach(|| training::train_heads(&model.inner, spec, &tcfg, &corpus))
        .map_err(py_err)?;
    let eval = PyDict::new(py);
    for &k in &run.eval.ks {
        let acc: Vec<f64> = (0..n_heads).filter_map(|h| run.eval.get(h, k)).collect();
        eval.set_item(format!("top{k}"), acc)?;
    }
    let losses = run.history.iter().map(|s| s.loss).collect();
    Ok((Heads { inner: run.weights }, losses, eval))
}

fn traces_to_py<'py>(py: Python<'py>, traces: &[StepTrace]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    traces
        .iter()
        .map(|t| {
            let d = PyDict::new(py);
            d.set_item("step_index", t.step_index)?;
            d.set_item("tokens_emitted", t.tokens_emitted.clone())?;
            d.set_item("tree_size_used", t.tree_size_used)?;
            d.set_item("accepted_length", t.accepted_length)?;
            Ok(d)
        })
        .collect()
}

/// Greedy decode. Speculative strategies need `heads` of the matching
/// variant. Returns `{"tokens", "traces", "extra_tokens_per_step"}`.
#[pyfunction]
#[pyo3(signature = (model, prompt, max_new_tokens=32, strategy="vanilla", heads=None, tree_budget=4, stop_tokens=Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn decode<'py>(
    py: Python<'py>,
    model: &TargetModel,
    prompt: Vec<u32>,
    max_new_tokens: usize,
    strategy: &str,
    heads: Option<&Heads>,
    tree_budget: usize,
    stop_tokens: Vec<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let strategy = parse::<Strategy>(strategy)?;
    let mut req = DecodeRequest::new(prompt, max_new_tokens, strategy).with_budget(tree_budget);
    req.stop_tokens = stop_tokens.into_iter().collect();
    let spec = heads
        .map(|h| Speculator::new(&model.inner, &h.inner))
        .transpose()
        .map_err(py_err)?;
    let mut specs = Speculators::default();
    match (strategy, spec) {
        (Strategy::Medusa, s) => specs.medusa = s,
        (Strategy::Seqar, s) => specs.seqar = s,
        (Strategy::Vanilla, _) => {}
    }
    let out = engine::run_request(&model.inner, &specs, &req).map_err(py_err)?;
    let metrics = bench::compute_metrics(&out.traces, out.wall_seconds.max(f64::MIN_POSITIVE)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("tokens", out.tokens)?;
    d.set_item("traces", traces_to_py(py, &out.traces)?)?;
    d.set_item("extra_tokens_per_step", metrics.extra_tokens_per_step)?;
    Ok(d)
}

/// Prefix-merge candidate sequences into a trie; returns
/// `(token, parent, depth)` per node in topological order.
#[pyfunction]
fn merge_sequences(seqs: Vec<Vec<u32>>) -> PyResult<Vec<(u32, Option<usize>, usize)>> {
    let tree = token_tree::TokenTree::merge_sequences(&seqs).map_err(py_err)?;
    Ok(tree.nodes().iter().map(|n| (n.token, n.parent, n.depth)).collect())
}

/// Aggregate metrics over step traces given as lists of emitted tokens.
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, steps: Vec<Vec<u32>>, wall_seconds: f64) -> PyResult<Bound<'py, PyDict>> {
    let traces: Vec<StepTrace> = steps
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| StepTrace {
            step_index: i,
            accepted_length: tokens.len().saturating_sub(1),
            tokens_emitted: tokens,
            tree_size_used: 0,
        })
        .collect();
    let DecodeMetrics {
        total_tokens,
        total_steps,
        wall_seconds,
        extra_tokens_per_step,
        tokens_per_second,
    } = bench::compute_metrics(&traces, wall_seconds).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("total_tokens", total_tokens)?;
    d.set_item("total_steps", total_steps)?;
    d.set_item("wall_seconds", wall_seconds)?;
    d.set_item("extra_tokens_per_step", extra_tokens_per_step)?;
    d.set_item("tokens_per_second", tokens_per_second)?;
    Ok(d)
}

#[pymodule]
fn seqar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TargetModel>()?;
    m.add_class::<Heads>()?;
    m.add_function(wrap_pyfunction!(grammar_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_target, m)?)?;
    m.add_function(wrap_pyfunction!(train_heads, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(merge_sequences, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    Ok(())
}
