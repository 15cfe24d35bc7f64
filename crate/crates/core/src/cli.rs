//! Command-line front end. Every run writes `run.json` recording the argv,
//! seed and checkpoint hashes; `replay` re-runs a recorded invocation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{
    compute_metrics, head_accuracy_eval, run_sweep, write_accuracy_csv, write_counts_csv, write_report,
    write_sweep_csv, SweepAxis, SweepSpec,
};
use crate::checkpoint::file_sha256;
use crate::engine::{run_batch, DecodeRequest, Speculators, Strategy, DEFAULT_TREE_BUDGET};
use crate::error::{Error, Result};
use crate::kvtext::KvText;
use crate::model::{ModelConfig, TargetModel};
use crate::speculator::{
    load_bundle, save_bundle, Augmenting, DecoderKv, Regressive, SeqarWeights, Speculator, SpeculatorConfig,
    Variant, DEFAULT_HEADS, DEFAULT_TOP_K,
};
use crate::training::{
    ablation_suite, pretrain_target, train_heads, AblationKind, AblationRow, AblationVariant, Corpus, TrainConfig,
    EVAL_KS,
};

#[derive(Debug, Parser)]
#[command(name = "seqar", version, about = "Speculative decoding with regressive draft heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialized target model.
    InitModel(InitModelArgs),
    /// Train a fresh target model on a corpus (next-token loss).
    PretrainTarget(PretrainArgs),
    /// Train draft heads on a frozen target.
    TrainHeads(TrainHeadsArgs),
    /// Decode a prompt with one strategy.
    Decode(DecodeArgs),
    /// Sweep tree budget or batch size across strategies.
    Sweep(SweepArgs),
    /// Train and evaluate ablation variants.
    Ablate(AblateArgs),
    /// Teacher-forced top-k accuracy of a checkpoint's heads.
    EvalAccuracy(EvalArgs),
    /// Re-run the invocation recorded in a run.json.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model config file (`key = value`); flags below override it.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self, seed: u64) -> Result<ModelConfig> {
        let mut cfg = match &self.model_config {
            Some(p) => ModelConfig::from_kv(&KvText::parse(&read_text(p)?)?)?,
            None => ModelConfig::default(),
        };
        let d_model_set = self.d_model.is_some() || self.n_heads.is_some();
        cfg.n_layers = self.layers.unwrap_or(cfg.n_layers);
        cfg.d_model = self.d_model.unwrap_or(cfg.d_model);
        cfg.n_heads = self.n_heads.unwrap_or(cfg.n_heads);
        if d_model_set {
            cfg.d_head = cfg.d_model / cfg.n_heads.max(1);
        }
        cfg.d_ff = self.d_ff.unwrap_or(cfg.d_ff);
        cfg.vocab_size = self.vocab.unwrap_or(cfg.vocab_size);
        cfg.max_seq = self.max_seq.unwrap_or(cfg.max_seq);
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

str_enum! {
    pub enum Synthetic {
        Grammar => "grammar",
        Cyclic => "cyclic",
        Markov => "markov",
        Uniform => "uniform",
    }
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus file: `.ids` for integer ids, anything else is read as bytes.
    #[arg(long, conflicts_with = "synthetic")]
    pub corpus: Option<PathBuf>,
    /// Generated corpus instead of a file.
    #[arg(long)]
    pub synthetic: Option<Synthetic>,
    #[arg(long, default_value_t = 100_000)]
    pub corpus_len: usize,
    /// Vocabulary for the markov and uniform generators.
    #[arg(long, default_value_t = 32)]
    pub corpus_vocab: usize,
}

impl CorpusArgs {
    fn load(&self, seed: u64) -> Result<Corpus> {
        match (&self.corpus, self.synthetic) {
            (Some(p), _) if p.extension().is_some_and(|e| e == "ids") => Corpus::from_ids_file(p, None),
            (Some(p), _) => Corpus::from_bytes_file(p),
            (None, Some(Synthetic::Grammar)) => Ok(Corpus::grammar(self.corpus_len, seed)),
            (None, Some(Synthetic::Cyclic)) => Ok(Corpus::cyclic(self.corpus_len)),
            (None, Some(Synthetic::Markov)) => Ok(Corpus::markov(self.corpus_len, self.corpus_vocab, seed)),
            (None, Some(Synthetic::Uniform)) => Ok(Corpus::uniform(self.corpus_len, self.corpus_vocab, seed)),
            (None, None) => Err(Error::InvalidConfig("pass --corpus or --synthetic".into())),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config file (`key = value`); flags below override it.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Comma-separated per-head loss weights.
    #[arg(long, value_delimiter = ',')]
    pub head_loss_weights: Option<Vec<f64>>,
}

impl TrainArgs {
    fn resolve(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg = match &self.train_config {
            Some(p) => TrainConfig::from_kv(&KvText::parse(&read_text(p)?)?)?,
            None => TrainConfig::default(),
        };
        cfg.steps = self.steps.unwrap_or(cfg.steps);
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.seq_len = self.seq_len.unwrap_or(cfg.seq_len);
        if let Some(w) = &self.head_loss_weights {
            cfg.head_loss_weights = w.clone();
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    #[arg(long, default_value = "seqar")]
    pub variant: Variant,
    #[arg(long, default_value_t = DEFAULT_HEADS)]
    pub heads: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long)]
    pub decoder_kv: Option<DecoderKv>,
    #[arg(long)]
    pub augmenting: Option<Augmenting>,
    #[arg(long)]
    pub regressive: Option<Regressive>,
}

impl SpecArgs {
    fn resolve(&self) -> Result<SpeculatorConfig> {
        let mut cfg = SpeculatorConfig::for_variant(self.variant, self.heads);
        cfg.top_k = self.top_k;
        if let Some(kv) = self.decoder_kv {
            cfg.decoder_kv = kv;
        }
        if let Some(a) = self.augmenting {
            cfg.augmenting = a;
        }
        if let Some(r) = self.regressive {
            cfg.regressive = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainHeadsArgs {
    /// Target model (a bundle; any heads in it are ignored).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeadSources {
    /// Target model plus (optionally) trained heads.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Further bundles over the same target whose heads are also loaded.
    #[arg(long)]
    pub heads_from: Vec<PathBuf>,
    /// Override the decoder key/value mode of loaded heads.
    #[arg(long)]
    pub decoder_kv: Option<DecoderKv>,
    /// Override the per-head candidate count of loaded heads.
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub heads: HeadSources,
    #[arg(long, default_value = "vanilla")]
    pub strategy: Strategy,
    /// UTF-8 text (byte tokens) or an `.ids` file.
    #[arg(long)]
    pub prompt_file: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    #[arg(long, default_value_t = DEFAULT_TREE_BUDGET)]
    pub tree_budget: usize,
    /// Concurrent copies of the request.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, value_delimiter = ',')]
    pub stop_tokens: Vec<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub heads: HeadSources,
    #[arg(long, default_value = "tree_budget")]
    pub axis: SweepAxis,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
    pub values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Strategy::Vanilla, Strategy::Medusa, Strategy::Seqar])]
    pub strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 16)]
    pub prompts: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    /// Tree budget on the batch-size axis.
    #[arg(long, default_value_t = DEFAULT_TREE_BUDGET)]
    pub tree_budget: usize,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Target model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `kind/augmenting` pairs such as `seqar_full/attn`, or `medusa`.
    /// Defaults to the standard set.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_HEADS)]
    pub heads: usize,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', default_values_t = EVAL_KS.to_vec())]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub run_json: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

/// Provenance written as `run.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub seed: u64,
    /// Resolved configuration as `key = value` text.
    pub config: String,
    /// SHA-256 of every checkpoint read, by path.
    pub inputs: Vec<(String, String)>,
    /// SHA-256 of every checkpoint written, by path.
    pub outputs: Vec<(String, String)>,
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{} does not exist", p.display())))
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::InvalidConfig(format!("output dir {}: {e}", dir.display())))
}

fn hash_entry(p: &Path) -> Result<(String, String)> {
    Ok((p.display().to_string(), file_sha256(p)?))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::InvalidConfig(format!("json: {e}")))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Process exit code for an error: 1 for configuration and input problems,
/// 2 for failures during computation.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::InvalidToken { .. }
        | Error::Empty(_) => 1,
        Error::Divergence { .. }
        | Error::NonFinite { .. }
        | Error::MaxSeqOverflow { .. }
        | Error::ShapeMismatch { .. }
        | Error::FullyMaskedRow { .. }
        | Error::InvalidTree(_)
        | Error::Cache(_) => 2,
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, args.get(1..).unwrap_or_default().to_vec()) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Run a parsed command. `argv` is recorded in `run.json`.
pub fn run(cli: Cli, argv: Vec<String>) -> Result<RunRecord> {
    let (dir, mut record) = match cli.command {
        Command::Replay(a) => return replay(&a),
        Command::InitModel(a) => (a.output_dir.clone(), init_model(&a)?),
        Command::PretrainTarget(a) => (a.output_dir.clone(), pretrain(&a)?),
        Command::TrainHeads(a) => (a.output_dir.clone(), train_heads_cmd(&a)?),
        Command::Decode(a) => (a.output_dir.clone(), decode(&a)?),
        Command::Sweep(a) => (a.output_dir.clone(), sweep(&a)?),
        Command::Ablate(a) => (a.output_dir.clone(), ablate(&a)?),
        Command::EvalAccuracy(a) => (a.output_dir.clone(), eval_accuracy(&a)?),
    };
    record.argv = argv;
    write_json(&dir.join("run.json"), &record)?;
    Ok(record)
}

fn record(command: &str, seed: u64, config: KvText) -> RunRecord {
    RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        argv: Vec::new(),
        seed,
        config: config.render(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    }
}

fn replay(a: &ReplayArgs) -> Result<RunRecord> {
    let rec: RunRecord = serde_json::from_str(&read_text(&a.run_json)?)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", a.run_json.display())))?;
    let mut argv = rec.argv.clone();
    if let Some(dir) = &a.output_dir {
        argv.retain_with_value("--output-dir");
        argv.push("--output-dir".into());
        argv.push(dir.display().to_string());
    }
    for (path, hash) in &rec.inputs {
        if file_sha256(path)? != *hash {
            return Err(Error::InvalidConfig(format!("{path} changed since the recorded run")));
        }
    }
    let mut full = vec!["seqar".to_string()];
    full.extend(argv.iter().cloned());
    let cli = Cli::try_parse_from(&full).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    run(cli, argv)
}

trait RemoveFlag {
    fn retain_with_value(&mut self, flag: &str);
}

impl RemoveFlag for Vec<String> {
    /// Drop `flag value` and `flag=value` occurrences.
    fn retain_with_value(&mut self, flag: &str) {
        let mut out = Vec::with_capacity(self.len());
        let mut skip = false;
        for a in self.drain(..) {
            if skip {
                skip = false;
            } else if a == flag {
                skip = true;
            } else if !a.starts_with(&format!("{flag}=")) {
                out.push(a);
            }
        }
        *self = out;
    }
}

fn init_model(a: &InitModelArgs) -> Result<RunRecord> {
    prepare_dir(&a.output_dir)?;
    let cfg = a.model.resolve(a.seed)?;
    let model = TargetModel::random(cfg.clone())?;
    save_bundle(&a.out, &model, None)?;
    let mut rec = record("init-model", a.seed, cfg.to_kv());
    rec.outputs.push(hash_entry(&a.out)?);
    Ok(rec)
}

fn check_vocab(corpus: &Corpus, model: &ModelConfig) -> Result<()> {
    if corpus.vocab_size > model.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "corpus vocabulary {} exceeds the model's {}",
            corpus.vocab_size, model.vocab_size
        )));
    }
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<RunRecord> {
    prepare_dir(&a.output_dir)?;
    let cfg = a.model.resolve(a.seed)?;
    let train = a.train.resolve(a.seed)?;
    let corpus = a.corpus.load(a.seed)?;
    check_vocab(&corpus, &cfg)?;
    let (model, history) = pretrain_target(cfg.clone(), &train, &corpus)?;
    save_bundle(&a.out, &model, None)?;
    write_json(&a.output_dir.join("pretrain_loss.json"), &history)?;
    let mut kv = KvText::new();
    kv.merge_prefixed("model", &cfg.to_kv());
    kv.merge_prefixed("train", &train.to_kv());
    let mut rec = record("pretrain-target", a.seed, kv);
    rec.outputs.push(hash_entry(&a.out)?);
    Ok(rec)
}

fn train_heads_cmd(a: &TrainHeadsArgs) -> Result<RunRecord> {
    require_file(&a.checkpoint)?;
    prepare_dir(&a.output_dir)?;
    let spec = a.spec.resolve()?;
    let train = a.train.resolve(a.seed)?;
    let (model, _) = load_bundle(&a.checkpoint)?;
    let corpus = a.corpus.load(a.seed)?;
    check_vocab(&corpus, model.config())?;
    let out = train_heads(&model, spec.clone(), &train, &corpus)?;
    save_bundle(&a.out, &model, Some(&out.weights))?;
    write_json(&a.output_dir.join("train_history.json"), &out.history)?;
    write_json(&a.output_dir.join("eval_accuracy.json"), &out.eval)?;
    let mut kv = KvText::new();
    kv.merge_prefixed("spec", &spec.to_kv());
    kv.merge_prefixed("train", &train.to_kv());
    let mut rec = record("train-heads", a.seed, kv);
    rec.inputs.push(hash_entry(&a.checkpoint)?);
    rec.outputs.push(hash_entry(&a.out)?);
    Ok(rec)
}

/// The target and every speculator found in the checkpoint sources.
struct Loaded {
    model: TargetModel,
    medusa: Option<SeqarWeights>,
    seqar: Option<SeqarWeights>,
    inputs: Vec<(String, String)>,
}

impl Loaded {
    fn speculators(&self) -> Result<Speculators<'_>> {
        let model = &self.model;
        Ok(Speculators {
            medusa: self.medusa.as_ref().map(|w| Speculator::new(model, w)).transpose()?,
            seqar: self.seqar.as_ref().map(|w| Speculator::new(model, w)).transpose()?,
        })
    }
}

fn same_weights(a: &TargetModel, b: &TargetModel) -> bool {
    a.config() == b.config() && a.named_tensors() == b.named_tensors()
}

fn load_sources(h: &HeadSources) -> Result<Loaded> {
    require_file(&h.checkpoint)?;
    let (model, first) = load_bundle(&h.checkpoint)?;
    let mut loaded = Loaded {
        model,
        medusa: None,
        seqar: None,
        inputs: vec![hash_entry(&h.checkpoint)?],
    };
    let mut specs = vec![first];
    for p in &h.heads_from {
        require_file(p)?;
        let (m, s) = load_bundle(p)?;
        if !same_weights(&m, &loaded.model) {
            return Err(Error::InvalidConfig(format!("{} has a different target model", p.display())));
        }
        loaded.inputs.push(hash_entry(p)?);
        specs.push(s);
    }
    for mut w in specs.into_iter().flatten() {
        if let Some(kv) = h.decoder_kv {
            w.config.decoder_kv = kv;
        }
        if let Some(k) = h.top_k {
            w.config.top_k = k;
        }
        w.config.validate()?;
        let slot = match w.config.variant {
            Variant::Medusa => &mut loaded.medusa,
            Variant::Seqar => &mut loaded.seqar,
        };
        if slot.is_some() {
            return Err(Error::InvalidConfig(format!("two sets of {} heads given", w.config.variant)));
        }
        *slot = Some(w);
    }
    Ok(loaded)
}

/// Prompt tokens and whether the input was an `.ids` file.
fn read_prompt(p: &Path) -> Result<(Vec<u32>, bool)> {
    require_file(p)?;
    if p.extension().is_some_and(|e| e == "ids") {
        Ok((Corpus::from_ids_file(p, None)?.tokens, true))
    } else {
        Ok((fs::read(p)?.into_iter().map(u32::from).collect(), false))
    }
}

fn render_tokens(tokens: &[u32], as_ids: bool) -> Result<Vec<u8>> {
    if as_ids {
        let s: Vec<String> = tokens.iter().map(u32::to_string).collect();
        Ok(format!("{}\n", s.join(" ")).into_bytes())
    } else {
        tokens
            .iter()
            .map(|&t| {
                u8::try_from(t).map_err(|_| Error::InvalidConfig(format!("token {t} is not a byte; use an .ids prompt")))
            })
            .collect()
    }
}

fn decode(a: &DecodeArgs) -> Result<RunRecord> {
    prepare_dir(&a.output_dir)?;
    let loaded = load_sources(&a.heads)?;
    let specs = loaded.speculators()?;
    let (prompt, as_ids) = read_prompt(&a.prompt_file)?;
    if a.batch == 0 {
        return Err(Error::InvalidConfig("--batch must be positive".into()));
    }
    let mut req = DecodeRequest::new(prompt, a.max_new, a.strategy).with_budget(a.tree_budget);
    req.stop_tokens = a.stop_tokens.iter().copied().collect::<BTreeSet<u32>>();
    req.validate()?;
    let reqs = vec![req; a.batch];
    let out = run_batch(&loaded.model, &specs, &reqs)?;
    let first = &out.outputs[0];
    let rendered = render_tokens(&first.tokens, as_ids)?;
    let name = if as_ids { "tokens.ids" } else { "tokens.txt" };
    fs::write(a.output_dir.join(name), &rendered)?;
    {
        use std::io::Write;
        let mut stdout = std::io::stdout().lock();
        stdout.write_all(&rendered)?;
        if !as_ids {
            stdout.write_all(b"\n")?;
        }
    }
    let traces: Vec<_> = out.outputs.iter().flat_map(|o| o.traces.iter().cloned()).collect();
    let metrics = compute_metrics(&traces, out.wall_seconds.max(f64::MIN_POSITIVE))?;
    write_json(&a.output_dir.join("metrics.json"), &metrics)?;
    write_json(&a.output_dir.join("traces.json"), &first.traces)?;
    let mut kv = KvText::new();
    kv.set("strategy", a.strategy);
    kv.set("max_new", a.max_new);
    kv.set("tree_budget", a.tree_budget);
    kv.set("batch", a.batch);
    let mut rec = record("decode", a.seed, kv);
    rec.inputs = loaded.inputs.clone();
    rec.inputs.push(hash_entry(&a.prompt_file)?);
    Ok(rec)
}

fn sweep(a: &SweepArgs) -> Result<RunRecord> {
    prepare_dir(&a.output_dir)?;
    let loaded = load_sources(&a.heads)?;
    let specs = loaded.speculators()?;
    let corpus = a.corpus.load(a.seed)?;
    check_vocab(&corpus, loaded.model.config())?;
    let spec = SweepSpec {
        axis: a.axis,
        values: a.values.clone(),
        repeats: a.repeats,
        strategies: a.strategies.clone(),
        n_prompts: a.prompts,
        prompt_len: a.prompt_len,
        max_new_tokens: a.max_new,
        tree_budget: a.tree_budget,
        seed: a.seed,
    };
    let rows = run_sweep(&loaded.model, &specs, &corpus, &spec)?;
    write_sweep_csv(a.output_dir.join("sweep.csv"), &rows)?;
    write_counts_csv(a.output_dir.join("counts.csv"), &rows)?;
    write_report(a.output_dir.join("report.md"), &rows)?;
    let mut kv = KvText::new();
    kv.set("axis", a.axis);
    let vals: Vec<String> = a.values.iter().map(usize::to_string).collect();
    kv.set("values", vals.join(","));
    let strategies: Vec<&str> = a.strategies.iter().map(|s| s.as_str()).collect();
    kv.set("strategies", strategies.join(","));
    kv.set("repeats", a.repeats);
    kv.set("prompts", a.prompts);
    kv.set("prompt_len", a.prompt_len);
    kv.set("max_new", a.max_new);
    let mut rec = record("sweep", a.seed, kv);
    rec.inputs = loaded.inputs;
    Ok(rec)
}

fn parse_variant(s: &str) -> Result<AblationVariant> {
    let (kind, aug) = match s.split_once('/') {
        Some((k, a)) => (k.parse::<AblationKind>()?, a.parse::<Augmenting>()?),
        None => (s.parse::<AblationKind>()?, Augmenting::FullTransformer),
    };
    let aug = if kind == AblationKind::Medusa { Augmenting::None } else { aug };
    Ok(AblationVariant::new(kind, aug))
}

fn ablate(a: &AblateArgs) -> Result<RunRecord> {
    require_file(&a.checkpoint)?;
    prepare_dir(&a.output_dir)?;
    let train = a.train.resolve(a.seed)?;
    let variants = if a.variants.is_empty() {
        AblationVariant::standard_set()
    } else {
        a.variants.iter().map(|s| parse_variant(s)).collect::<Result<_>>()?
    };
    let (model, _) = load_bundle(&a.checkpoint)?;
    let corpus = a.corpus.load(a.seed)?;
    check_vocab(&corpus, model.config())?;
    let rows = ablation_suite(&model, &corpus, &variants, a.heads, &train)?;
    write_accuracy_csv(a.output_dir.join("accuracy.csv"), &rows)?;
    let mut kv = KvText::new();
    let names: Vec<String> = variants.iter().map(AblationVariant::name).collect();
    kv.set("variants", names.join(","));
    kv.set("heads", a.heads);
    kv.merge_prefixed("train", &train.to_kv());
    let mut rec = record("ablate", a.seed, kv);
    rec.inputs.push(hash_entry(&a.checkpoint)?);
    Ok(rec)
}

fn eval_accuracy(a: &EvalArgs) -> Result<RunRecord> {
    require_file(&a.checkpoint)?;
    prepare_dir(&a.output_dir)?;
    let (model, spec) = load_bundle(&a.checkpoint)?;
    let spec = spec.ok_or_else(|| Error::InvalidConfig(format!("{} holds no heads", a.checkpoint.display())))?;
    let corpus = a.corpus.load(a.seed)?;
    check_vocab(&corpus, model.config())?;
    let acc = head_accuracy_eval(&model, &spec, &corpus, a.seq_len, &a.ks)?;
    let mut rows = Vec::new();
    for (head, accs) in acc.accuracy.iter().enumerate() {
        for (&k, &accuracy) in acc.ks.iter().zip(accs) {
            rows.push(AblationRow {
                variant: spec.config.variant.to_string(),
                head: head + 1,
                k,
                accuracy,
            });
        }
    }
    write_accuracy_csv(a.output_dir.join("accuracy.csv"), &rows)?;
    let mut kv = spec.config.to_kv();
    kv.set("seq_len", a.seq_len);
    let mut rec = record("eval-accuracy", a.seed, kv);
    rec.inputs.push(hash_entry(&a.checkpoint)?);
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_removal_handles_both_forms() {
        let mut v: Vec<String> = ["a", "--output-dir", "x", "--output-dir=y", "b"].map(String::from).to_vec();
        v.retain_with_value("--output-dir");
        assert_eq!(v, vec!["a", "b"]);
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!(
            parse_variant("mlp_regressive/attn").unwrap(),
            AblationVariant::new(AblationKind::MlpRegressive, Augmenting::AttentionOnly)
        );
        assert_eq!(parse_variant("medusa").unwrap().augmenting, Augmenting::None);
        assert!(parse_variant("bogus").is_err());
    }

    #[test]
    fn unknown_flag_exits_one() {
        assert_eq!(main_with_args(["seqar", "decode", "--bogus"]), 1);
    }
}
