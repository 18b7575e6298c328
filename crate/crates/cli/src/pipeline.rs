//! In-memory pipeline stages behind the commands.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tmlevt::corpus::{
    build_vocabulary, corpus_stats, deduplicate, split_dataset, DatasetSplit, DomainStats, SplitSizes, TokenId,
};
use tmlevt::decoder::{batch_decode, make_init, DecodeItem, HypothesisLine, InitMode};
use tmlevt::edit_calculus::{multitask_sample, tm_encoder_input, ExampleConfig, RollInExample};
use tmlevt::eval::{
    bucket_edges, bucketed_eval, diagnostic_table1, iteration_stats_from, per_domain_bleu, timing_harness,
    unrelated_rate, DiagnosticRow, EvalItem, EvalReport, UNRELATED_COUNTING,
};
use tmlevt::policy::checkpoint::{Checkpoint, CheckpointMeta, ModelFlags};
use tmlevt::policy::model::{Model, ModelConfig};
use tmlevt::policy::train::{AdamConfig, LossOptions, StepRecord, TrainConfig, Trainer};
use tmlevt::rng::{self, streams};
use tmlevt::tm_index::{Match, NGramIndex, Window};
use tmlevt::{DecodeConfig, DecodeTrace, EditPolicy, SentenceRecord, Vocabulary, ARTIFACT_VERSION};

use crate::config::RunConfig;
use crate::CliError;

/// A test sentence with its best match from the training TM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestItem {
    pub id: u64,
    pub domain: String,
    /// `high`, `mid` or `heldout`.
    pub split: String,
    pub src: String,
    pub tgt: String,
    pub tm_id: Option<u64>,
    pub tm_src: Option<String>,
    pub tm_tgt: Option<String>,
    pub sim: Option<f64>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl TestItem {
    pub fn src_tokens(&self) -> Vec<String> {
        words(&self.src)
    }

    pub fn tgt_tokens(&self) -> Vec<String> {
        words(&self.tgt)
    }

    pub fn tm_tokens(&self) -> Option<Vec<String>> {
        self.tm_tgt.as_deref().map(words)
    }
}

pub fn window(cfg: &RunConfig) -> Result<Window, CliError> {
    Ok(Window::new(cfg.retrieval.k, cfg.retrieval.sim_min, cfg.retrieval.sim_max)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub records: usize,
    pub duplicates_removed: usize,
    pub train_examples: usize,
    pub tm_examples: usize,
    pub split: DatasetSplit,
    pub stats: BTreeMap<String, DomainStats>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub examples: Vec<RollInExample>,
    pub test: Vec<TestItem>,
    pub heldout: Vec<TestItem>,
    pub manifest: Manifest,
}

/// Self-excluded matches of every record against the whole corpus.
pub fn self_matches(records: &[SentenceRecord], cfg: &RunConfig) -> Result<Vec<Vec<Match>>, CliError> {
    let index = NGramIndex::build(records, cfg.retrieval.n)?;
    Ok(index.retrieve_all(records, window(cfg)?, true))
}

/// Dedup, split by TM coverage, build the vocabulary and the training TM,
/// and sample roll-in examples. `corpus_matches`, when given, must be the
/// self-excluded matches of the deduplicated records in order.
pub fn prepare(
    records: &[SentenceRecord],
    corpus_matches: Option<Vec<Vec<Match>>>,
    cfg: &RunConfig,
) -> Result<Prepared, CliError> {
    let original = records.len();
    let records = deduplicate(records);
    let matches = match corpus_matches {
        Some(m) => m,
        None => self_matches(&records, cfg)?,
    };
    let stats = corpus_stats(&records, &matches)?;
    let sizes = SplitSizes {
        high: cfg.split.high,
        mid: cfg.split.mid,
        heldout: cfg.split.heldout,
    };
    let split = split_dataset(&records, &matches, sizes, cfg.seed)?;
    let by_id: HashMap<u64, &SentenceRecord> = records.iter().map(|r| (r.id, r)).collect();
    let pick = |ids: &[u64]| -> Vec<SentenceRecord> { ids.iter().map(|i| by_id[i].clone()).collect() };
    let train = pick(&split.train);
    let vocab = build_vocabulary(&train, cfg.vocab_max_size)?;
    let index = NGramIndex::build(&train, cfg.retrieval.n)?;
    let train_matches = index.retrieve_all(&train, window(cfg)?, true);

    let ex_cfg = ExampleConfig {
        src_tm: cfg.training.src_tm,
        tgt_tm: cfg.training.tgt_tm,
        // applied online by the trainer from the current model
        self_pred: false,
        k_max: cfg.model.k_max,
    };
    let encoded: Vec<(Vec<TokenId>, Vec<TokenId>, Vec<Vec<TokenId>>)> = train
        .iter()
        .zip(&train_matches)
        .map(|(r, ms)| {
            (
                vocab.encode(&r.src),
                vocab.encode(&r.tgt),
                ms.iter().map(|m| vocab.encode(&m.tgt_tokens)).collect(),
            )
        })
        .collect();
    let mut examples = Vec::new();
    for round in 0..cfg.training.rounds {
        let mut rng = rng::indexed_stream(cfg.seed, streams::SAMPLER, round as u64);
        for (src, t, tms) in &encoded {
            examples.extend(multitask_sample(src, t, tms, cfg.training.p_tm, &ex_cfg, &mut rng, None)?);
        }
    }

    let best = Window::new(1, 0.0, cfg.retrieval.sim_max)?;
    let items = |ids: &[u64], name: &str| -> Vec<TestItem> {
        ids.iter()
            .map(|id| {
                let r = by_id[id];
                let m = index.retrieve(&r.src, best, None).into_iter().next();
                TestItem {
                    id: r.id,
                    domain: r.domain.clone(),
                    split: name.to_string(),
                    src: r.src.join(" "),
                    tgt: r.tgt.join(" "),
                    tm_id: m.as_ref().map(|m| m.segment_id),
                    tm_src: m.as_ref().map(|m| m.src_tokens.join(" ")),
                    tm_tgt: m.as_ref().map(|m| m.tgt_tokens.join(" ")),
                    sim: m.map(|m| m.sim),
                }
            })
            .collect()
    };
    let mut test = items(&split.test_high, "high");
    test.extend(items(&split.test_mid, "mid"));
    let heldout = items(&split.heldout, "heldout");
    let manifest = Manifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        records: records.len(),
        duplicates_removed: original - records.len(),
        train_examples: examples.len(),
        tm_examples: examples.iter().filter(|e| e.is_tm()).count(),
        split,
        stats,
        config: cfg.echo(),
    };
    Ok(Prepared {
        vocab,
        examples,
        test,
        heldout,
        manifest,
    })
}

pub fn model_config(cfg: &RunConfig, vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab,
        d_model: cfg.model.d_model,
        heads: cfg.model.heads,
        ff: cfg.model.ff,
        enc_layers: cfg.model.enc_layers,
        dec_layers: cfg.model.dec_layers,
        k_max: cfg.model.k_max,
    }
}

pub fn flags(cfg: &RunConfig) -> ModelFlags {
    ModelFlags {
        src_tm: cfg.training.src_tm,
        tgt_tm: cfg.training.tgt_tm,
    }
}

/// Train from scratch for `cfg.training.steps` steps, reporting each step.
pub fn train(
    examples: &[RollInExample],
    vocab: &Vocabulary,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Checkpoint<f32>, CliError> {
    if examples.is_empty() {
        return Err(CliError::Input("no training examples".into()));
    }
    let mcfg = model_config(cfg, vocab.len());
    let model = Model::<f32>::new(mcfg, cfg.seed)?;
    let tcfg = TrainConfig {
        batch_size: cfg.training.batch_size,
        adam: AdamConfig {
            lr: cfg.training.lr,
            warmup: cfg.training.warmup,
            ..Default::default()
        },
        loss: LossOptions {
            final_del: cfg.training.final_del,
            self_pred: cfg.training.self_pred,
            weights: cfg.training.weights,
        },
        seed: cfg.seed,
    };
    let mut trainer = Trainer::new(model, tcfg)?;
    for _ in 0..cfg.training.steps {
        let rec = trainer.train_step(examples)?;
        on_step(&rec);
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            artifact_version: ARTIFACT_VERSION.to_string(),
            model: mcfg,
            flags: flags(cfg),
            steps: trainer.steps_done(),
            config: cfg.echo(),
        },
        vocab: vocab.clone(),
        model: trainer.model,
    })
}

/// Encoder inputs and initial targets for the configured decoding mode.
/// With `use_tm` off (or no match) the encoder sees the source alone.
pub fn decode_items(
    items: &[TestItem],
    vocab: &Vocabulary,
    flags: ModelFlags,
    cfg: &RunConfig,
) -> Result<Vec<DecodeItem>, CliError> {
    let mode = cfg.decode.init_mode;
    let mut rng = rng::stream(cfg.seed, streams::INIT);
    let refs: Vec<Vec<TokenId>> = items.iter().map(|it| vocab.encode(&it.tgt_tokens())).collect();
    items
        .iter()
        .zip(&refs)
        .map(|(it, reference)| {
            let src = vocab.encode(&it.src_tokens());
            let tm = it.tm_tokens().filter(|_| cfg.decode.use_tm).map(|t| vocab.encode(&t));
            let encoder_input = match &tm {
                Some(t) if flags.src_tm && !t.is_empty() => tm_encoder_input(&src, t),
                _ => src,
            };
            let init = match mode {
                InitMode::Tm => tm.filter(|_| flags.tgt_tm).unwrap_or_default(),
                InitMode::Given => return Err(CliError::Input("init mode given is only available through the library".into())),
                InitMode::RandomSent => {
                    let others: Vec<Vec<TokenId>> = refs.iter().filter(|r| *r != reference).cloned().collect();
                    make_init(mode, None, reference, &others, None, &mut rng)?
                }
                _ => make_init(mode, None, reference, &[], None, &mut rng)?,
            };
            Ok(DecodeItem {
                id: it.id,
                encoder_input,
                init,
                reference: Some(reference.clone()),
            })
        })
        .collect()
}

pub fn decode_config(cfg: &RunConfig) -> DecodeConfig {
    DecodeConfig {
        max_iter: cfg.decode.max_iter,
        init_mode: cfg.decode.init_mode,
        loop_detection: cfg.decode.loop_detection,
    }
}

pub struct DecodeRun {
    pub hyps: Vec<Vec<String>>,
    pub traces: Vec<DecodeTrace>,
    pub elapsed_ms: f64,
    pub timing_ms: Option<f64>,
}

impl DecodeRun {
    pub fn lines(&self, items: &[DecodeItem]) -> Vec<HypothesisLine> {
        items
            .iter()
            .zip(&self.hyps)
            .zip(&self.traces)
            .map(|((it, h), t)| HypothesisLine {
                id: it.id,
                hyp: h.join(" "),
                iterations: t.iterations,
                convergence: t.convergence,
            })
            .collect()
    }
}

pub fn run_decode(
    policy: &dyn EditPolicy,
    items: &[DecodeItem],
    vocab: &Vocabulary,
    cfg: &RunConfig,
    timing: bool,
) -> Result<DecodeRun, CliError> {
    let dcfg = decode_config(cfg);
    let start = Instant::now();
    let out = batch_decode(policy, items, &dcfg)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1000.0;
    let timing_ms = if timing && !items.is_empty() {
        Some(timing_harness(policy, items, &dcfg)?)
    } else {
        None
    };
    let (hyps, traces) = out.into_iter().map(|(h, t)| (vocab.decode(&h), t)).unzip();
    Ok(DecodeRun {
        hyps,
        traces,
        elapsed_ms,
        timing_ms,
    })
}

fn by_id<'a>(lines: &'a [HypothesisLine], items: &[TestItem], what: &str) -> Result<Vec<&'a HypothesisLine>, CliError> {
    let map: HashMap<u64, &HypothesisLine> = lines.iter().map(|l| (l.id, l)).collect();
    items
        .iter()
        .map(|it| {
            map.get(&it.id)
                .copied()
                .ok_or_else(|| CliError::Input(format!("{what}: no hypothesis for id {}", it.id)))
        })
        .collect()
}

/// Score hypotheses (and optionally a second system decoded without TM)
/// against the test items.
pub fn evaluate(
    items: &[TestItem],
    hyps: &[HypothesisLine],
    hyps_no_tm: Option<&[HypothesisLine]>,
    timing_ms: Option<f64>,
    cfg: &RunConfig,
) -> Result<EvalReport, CliError> {
    if items.is_empty() {
        return Err(CliError::Input("no test items".into()));
    }
    let main = by_id(hyps, items, "hyps")?;
    let h: Vec<Vec<String>> = main.iter().map(|l| words(&l.hyp)).collect();
    let refs: Vec<Vec<String>> = items.iter().map(TestItem::tgt_tokens).collect();
    let copy: Vec<Vec<String>> = items.iter().map(|it| it.tm_tokens().unwrap_or_default()).collect();
    let bleu = tmlevt::eval::corpus_bleu(&h, &refs)?;
    let with_tm: Vec<usize> = (0..items.len()).filter(|&i| items[i].tm_tgt.is_some()).collect();
    let sel = |v: &[Vec<String>]| -> Vec<Vec<String>> { with_tm.iter().map(|&i| v[i].clone()).collect() };
    let rate = if with_tm.is_empty() {
        None
    } else {
        unrelated_rate(&sel(&h), &sel(&copy), &sel(&refs))?
    };
    let iters = iteration_stats_from(main.iter().map(|l| l.iterations));
    let domains: Vec<String> = items.iter().map(|it| it.domain.clone()).collect();
    let no_tm = match hyps_no_tm {
        Some(lines) => Some(by_id(lines, items, "hyps without TM")?.iter().map(|l| words(&l.hyp)).collect::<Vec<_>>()),
        None => None,
    };
    let sims: Vec<f64> = items.iter().map(|it| it.sim.unwrap_or(0.0)).collect();
    let edges = bucket_edges(cfg.eval.bucket_start, cfg.eval.bucket_width);
    let buckets = bucketed_eval(&sims, &refs, &copy, no_tm.as_deref(), Some(&h), &edges)?;
    Ok(EvalReport {
        artifact_version: ARTIFACT_VERSION.to_string(),
        n: items.len(),
        bleu,
        unrelated_rate: rate,
        unrelated_counting: UNRELATED_COUNTING.to_string(),
        mean_iterations: iters.as_ref().map(|s| s.mean),
        iteration_histogram: iters.map(|s| s.histogram).unwrap_or_default(),
        per_domain: per_domain_bleu(&domains, &h, &refs)?,
        buckets,
        timing_ms,
        config: cfg.echo(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub artifact_version: String,
    pub policy: String,
    pub n: usize,
    pub rows: Vec<DiagnosticRow>,
    pub config: serde_json::Value,
}

/// Table-1-style decoding from unrelated starting points. Random sentences
/// come from the other test references.
pub fn diagnose(
    policy: &dyn EditPolicy,
    items: &[TestItem],
    vocab: &Vocabulary,
    src_tm: bool,
    cfg: &RunConfig,
) -> Result<DiagnosticReport, CliError> {
    let eval_items: Vec<EvalItem> = items
        .iter()
        .map(|it| EvalItem {
            id: it.id,
            domain: it.domain.clone(),
            src: vocab.encode(&it.src_tokens()),
            reference: vocab.encode(&it.tgt_tokens()),
            tm_tgt: it.tm_tokens().map(|t| vocab.encode(&t)),
            sim: it.sim,
        })
        .collect();
    let pool: Vec<Vec<TokenId>> = eval_items.iter().map(|i| i.reference.clone()).collect();
    let mut rng = rng::stream(cfg.seed, streams::INIT);
    let rows = diagnostic_table1(policy, &eval_items, &pool, src_tm, &decode_config(cfg), &mut rng)?;
    Ok(DiagnosticReport {
        artifact_version: ARTIFACT_VERSION.to_string(),
        policy: policy.name().to_string(),
        n: items.len(),
        rows,
        config: cfg.echo(),
    })
}

/// A vocabulary covering every token of the items, for the non-neural policies.
pub fn vocab_from_items(items: &[TestItem]) -> Vocabulary {
    let mut toks: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for it in items {
        for w in it.src_tokens().into_iter().chain(it.tgt_tokens()).chain(it.tm_tokens().unwrap_or_default()) {
            if seen.insert(w.clone()) {
                toks.push(w);
            }
        }
    }
    Vocabulary::from_tokens(toks)
}

