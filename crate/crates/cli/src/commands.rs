//! Subcommand definitions and their file-level plumbing.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use tmlevt::decoder::HypothesisLine;
use tmlevt::edit_calculus::RollInExample;
use tmlevt::policy::checkpoint::{Checkpoint, ModelFlags};
use tmlevt::policy::{CopyPolicy, NeuralPolicy, OraclePolicy};
use tmlevt::tm_index::{match_dump_line, parse_match_dump, NGramIndex};
use tmlevt::corpus::{corpus_stats, deduplicate, generate_synthetic, load_corpus, write_corpus, Grammar};
use tmlevt::{EditPolicy, Vocabulary, ARTIFACT_VERSION};

use crate::config::RunConfig;
use crate::pipeline::{self, TestItem};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "tmlevt", version, about = "Translation-memory guided edit-based translation")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded, timing-free outputs that are bit-identical across runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus from a template grammar.
    Synth(SynthArgs),
    /// Validate a corpus and report TM coverage per domain.
    Ingest(IngestArgs),
    /// Build and persist the n-gram retrieval index.
    Index(IndexArgs),
    /// Retrieve fuzzy matches for a query corpus.
    Retrieve(RetrieveArgs),
    /// Split, build the vocabulary and sample training examples.
    Prepare(PrepareArgs),
    /// Train the edit policy.
    Train(TrainArgs),
    /// Decode a test set with a checkpoint or a built-in policy.
    Decode(DecodeArgs),
    /// Score hypotheses.
    Eval(EvalArgs),
    /// Decode from empty, random and shuffled starting points.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Grammar JSON; the built-in grammar when absent.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Stats JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the deduplicated corpus here.
    #[arg(long)]
    pub clean: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Query corpus (JSONL records).
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip index entries whose id equals the query id.
    #[arg(long)]
    pub exclude_self: bool,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Precomputed self-excluded matches of the deduplicated corpus.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss CSV; next to the checkpoint when absent.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BuiltinPolicy {
    Copy,
    Oracle,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long, conflicts_with = "policy")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: Option<BuiltinPolicy>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Test items written by `prepare`.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Run the sequential timing pass as well.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub hyps: PathBuf,
    /// Same system decoded without TM, for the bucket curve.
    #[arg(long)]
    pub hyps_no_tm: Option<PathBuf>,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub bucket_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Cli {
    /// Config file, then `--set` overrides, then the dedicated flags.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if self.deterministic {
            overrides.push("deterministic=true".into());
        }
        if let Some(t) = self.threads {
            overrides.push(format!("threads={t}"));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve_config()?;
    let threads = if cfg.deterministic { Some(1) } else { cfg.threads };
    if let Some(n) = threads {
        // fails only when a pool already exists, as in repeated in-process calls
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth(a) => synth(a, &cfg),
        Command::Ingest(a) => ingest(a, &cfg),
        Command::Index(a) => index(a, &cfg),
        Command::Retrieve(a) => retrieve(a, &cfg),
        Command::Prepare(a) => prepare(a, &cfg),
        Command::Train(a) => train(a, &cfg),
        Command::Decode(a) => decode(a, &cfg),
        Command::Eval(a) => eval(a, &cfg),
        Command::Diagnose(a) => diagnose(a, &cfg),
    }
}

fn from_cfg(given: &Option<PathBuf>, fallback: &Option<String>, what: &str) -> Result<PathBuf, CliError> {
    given
        .clone()
        .or_else(|| fallback.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Input(format!("missing {what} path")))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    match path {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<(), CliError> {
    let mut w = create(path)?;
    for l in lines {
        writeln!(w, "{l}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| CliError::Input(format!("{}: line {}: {e}", path.display(), no + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Sidecar path carrying the config echo of a JSONL or binary artifact.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_meta(path: &Path, kind: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<(), CliError> {
    let mut meta = serde_json::json!({
        "artifact_version": ARTIFACT_VERSION,
        "kind": kind,
        "config": cfg.echo(),
    });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    write_json(Some(&meta_path(path)), &meta)
}

pub fn synth(a: &SynthArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let grammar = match a.grammar.clone().or_else(|| cfg.synth_grammar.as_ref().map(PathBuf::from)) {
        Some(p) => Grammar::from_json(&fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?)?,
        None => Grammar::builtin(),
    };
    let n = a.n.unwrap_or(cfg.synth_n);
    let records = generate_synthetic(&grammar, n, cfg.seed)?;
    write_corpus(&a.out, &records)?;
    write_meta(&a.out, "corpus", cfg, serde_json::json!({ "records": records.len() }))?;
    info!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

pub fn ingest(a: &IngestArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let path = from_cfg(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let records = load_corpus(&path)?;
    let clean = deduplicate(&records);
    let matches = pipeline::self_matches(&clean, cfg)?;
    let stats = corpus_stats(&clean, &matches)?;
    if let Some(out) = &a.clean {
        write_corpus(out, &clean)?;
        write_meta(out, "corpus", cfg, serde_json::json!({ "records": clean.len() }))?;
    }
    write_json(a.out.as_deref(), &stats)?;
    if let Some(out) = &a.out {
        let extra = serde_json::json!({ "duplicates_removed": records.len() - clean.len() });
        write_meta(out, "stats", cfg, extra)?;
    }
    Ok(())
}

pub fn index(a: &IndexArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = from_cfg(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let out = from_cfg(&a.out, &cfg.paths.index, "index")?;
    let records = load_corpus(&corpus)?;
    let idx = NGramIndex::build(&records, cfg.retrieval.n)?;
    idx.save(&out)?;
    write_meta(&out, "index", cfg, serde_json::json!({ "records": idx.len() }))
}

pub fn retrieve(a: &RetrieveArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let path = from_cfg(&a.index, &cfg.paths.index, "index")?;
    let idx = NGramIndex::load(&path)?;
    let queries = load_corpus(&a.queries)?;
    let matches = idx.retrieve_all(&queries, pipeline::window(cfg)?, a.exclude_self);
    write_lines(&a.out, queries.iter().zip(&matches).map(|(q, m)| match_dump_line(q.id, m)))?;
    write_meta(&a.out, "matches", cfg, serde_json::json!({ "exclude_self": a.exclude_self }))
}

pub fn prepare(a: &PrepareArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = from_cfg(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let dir = from_cfg(&a.out_dir, &cfg.paths.out_dir, "output directory")?;
    let records = load_corpus(&corpus)?;
    let matches = match &a.matches {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let dump = parse_match_dump(&text)?;
            let clean = deduplicate(&records);
            if dump.len() != clean.len() || dump.iter().zip(&clean).any(|((q, _), r)| *q != r.id) {
                return Err(CliError::Input(format!(
                    "{}: matches must list the deduplicated corpus in order",
                    p.display()
                )));
            }
            Some(dump.into_iter().map(|(_, m)| m).collect())
        }
        None => None,
    };
    let prep = pipeline::prepare(&records, matches, cfg)?;
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_lines(&dir.join("train.jsonl"), prep.examples.iter().map(RollInExample::to_json))?;
    let item_line = |t: &TestItem| serde_json::to_string(t).expect("item serializes");
    write_lines(&dir.join("test.jsonl"), prep.test.iter().map(item_line))?;
    write_lines(&dir.join("heldout.jsonl"), prep.heldout.iter().map(item_line))?;
    write_text(&dir.join("vocab.json"), &prep.vocab.to_json())?;
    write_json(Some(&dir.join("manifest.json")), &prep.manifest)?;
    info!("{} examples, {} test items", prep.examples.len(), prep.test.len());
    Ok(())
}

pub fn train(a: &TrainArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let out = from_cfg(&a.out, &cfg.paths.checkpoint, "checkpoint")?;
    let vocab_path = a.data.join("vocab.json");
    let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| CliError::io(&vocab_path, e))?;
    let vocab = Vocabulary::from_json(&vocab_text).map_err(|e| CliError::json(&vocab_path, e))?;
    let examples: Vec<RollInExample> = read_jsonl(&a.data.join("train.jsonl"))?;
    let log_path = a.loss_log.clone().unwrap_or_else(|| out.with_extension("loss.csv"));
    let mut log = create(&log_path)?;
    let mut log_err = None;
    writeln!(log, "step,loss_del,loss_plh,loss_tok,loss_final_del").map_err(|e| CliError::io(&log_path, e))?;
    let every = cfg.training.log_every;
    let ck = pipeline::train(&examples, &vocab, cfg, |r| {
        if r.step % every == 0 || r.step == cfg.training.steps {
            let l = r.losses;
            if let Err(e) = writeln!(log, "{},{},{},{},{}", r.step, l.del, l.plh, l.tok, l.final_del) {
                log_err.get_or_insert(e);
            }
            if r.step % 100 == 0 {
                info!("step {} loss {:.4}", r.step, r.total);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(CliError::io(&log_path, e));
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    ck.save(&out)?;
    Ok(())
}

/// Either a trained checkpoint or a built-in policy with its vocabulary.
pub struct LoadedPolicy {
    pub policy: Box<dyn EditPolicy>,
    pub vocab: Vocabulary,
    pub flags: ModelFlags,
}

pub fn load_policy(a: &PolicyArgs, items: &[TestItem], cfg: &RunConfig) -> Result<LoadedPolicy, CliError> {
    let checkpoint = match (&a.checkpoint, a.policy) {
        (Some(p), _) => Some(p.clone()),
        (None, None) => cfg.paths.checkpoint.as_ref().map(PathBuf::from),
        (None, Some(_)) => None,
    };
    if let Some(path) = checkpoint {
        let ck = Checkpoint::<f32>::load(&path)?;
        return Ok(LoadedPolicy {
            flags: ck.meta.flags,
            vocab: ck.vocab,
            policy: Box::new(NeuralPolicy::new(ck.model, ck.meta.flags)),
        });
    }
    let vocab = pipeline::vocab_from_items(items);
    let policy: Box<dyn EditPolicy> = match a.policy {
        Some(BuiltinPolicy::Copy) => Box::new(CopyPolicy::new(vocab.len(), cfg.model.k_max)),
        Some(BuiltinPolicy::Oracle) => Box::new(OraclePolicy::new(vocab.len(), cfg.model.k_max)),
        None => return Err(CliError::Input("give --checkpoint or --policy".into())),
    };
    Ok(LoadedPolicy {
        policy,
        vocab,
        flags: ModelFlags::default(),
    })
}

pub fn decode(a: &DecodeArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let items: Vec<TestItem> = read_jsonl(&a.test)?;
    let lp = load_policy(&a.policy, &items, cfg)?;
    let dec = pipeline::decode_items(&items, &lp.vocab, lp.flags, cfg)?;
    let timing = a.timing && !cfg.deterministic;
    let run = pipeline::run_decode(lp.policy.as_ref(), &dec, &lp.vocab, cfg, timing)?;
    let lines = run.lines(&dec);
    write_lines(&a.out, lines.iter().map(|l| serde_json::to_string(l).expect("line serializes")))?;
    if let Some(t) = &a.traces {
        write_lines(
            t,
            dec.iter().zip(&run.traces).map(|(it, tr)| {
                serde_json::json!({ "id": it.id, "trace": tr }).to_string()
            }),
        )?;
    }
    let mut extra = serde_json::json!({ "policy": lp.policy.name(), "n": lines.len() });
    if !cfg.deterministic {
        extra["elapsed_ms"] = run.elapsed_ms.into();
        extra["timing_ms"] = run.timing_ms.into();
    }
    write_meta(&a.out, "hypotheses", cfg, extra)
}

fn read_hyps(path: &Path) -> Result<Vec<HypothesisLine>, CliError> {
    read_jsonl(path)
}

/// The sequential timing recorded next to a hypothesis file, if any.
fn recorded_timing(hyps: &Path) -> Option<f64> {
    let text = fs::read_to_string(meta_path(hyps)).ok()?;
    serde_json::from_str::<serde_json::Value>(&text).ok()?.get("timing_ms")?.as_f64()
}

pub fn eval(a: &EvalArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let items: Vec<TestItem> = read_jsonl(&a.test)?;
    let hyps = read_hyps(&a.hyps)?;
    let no_tm = a.hyps_no_tm.as_deref().map(read_hyps).transpose()?;
    let report = pipeline::evaluate(&items, &hyps, no_tm.as_deref(), recorded_timing(&a.hyps), cfg)?;
    if let Some(p) = &a.bucket_csv {
        write_text(p, &tmlevt::eval::bucket_csv(&report.buckets))?;
    }
    write_json(a.out.as_deref(), &report)
}

pub fn diagnose(a: &DiagnoseArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let items: Vec<TestItem> = read_jsonl(&a.test)?;
    let lp = load_policy(&a.policy, &items, cfg)?;
    let report = pipeline::diagnose(lp.policy.as_ref(), &items, &lp.vocab, lp.flags.src_tm, cfg)?;
    write_json(a.out.as_deref(), &report)
}
