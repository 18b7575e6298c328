//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmlevt::corpus::{generate_synthetic, Grammar, NUM_SPECIAL};
use tmlevt::decoder::{batch_decode, DecodeItem};
use tmlevt::edit_calculus::{
    apply_delete, apply_placeholders, fill_tokens, make_tm_example, make_vanilla_example, oracle_delete_labels,
    oracle_insertion_labels, ExampleConfig, RollInExample,
};
use tmlevt::eval::{corpus_bleu, unrelated_rate, EvalReport};
use tmlevt::policy::checkpoint::Checkpoint;
use tmlevt::policy::gradcheck::{grad_check, sample_indices, ModelObjective};
use tmlevt::policy::model::{Model, ModelConfig};
use tmlevt::policy::train::LossOptions;
use tmlevt::policy::{CopyPolicy, NeuralPolicy, OraclePolicy};
use tmlevt::tm_index::{edit_distance, similarity, NGramIndex, Window};
use tmlevt::{DecodeConfig, InitMode, SentenceRecord};
use tmlevt_cli::config::RunConfig;
use tmlevt_cli::pipeline::{self, DiagnosticReport, Prepared, TestItem};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, secs: f64) -> Result<(), String> {
    let t = start.elapsed().as_secs_f64();
    ensure(t < secs, format!("took {t:.1}s, limit {secs}s"))
}

// ---------------------------------------------------------------------------

fn toks(v: &[u8]) -> Vec<String> {
    v.iter().map(|b| format!("w{b}")).collect()
}

fn retrieval_exactness() -> Check {
    let start = Instant::now();
    let x = "Measures to reduce or eliminate releases from unintentional production";
    let y = "Measures to reduce or eliminate releases from intentional production and use";
    let split = |s: &'static str| s.split_whitespace().collect::<Vec<_>>();
    let sim = similarity(&split(x), &split(y)).map_err(|e| e.to_string())?;
    ensure((sim - 0.727).abs() <= 0.001, format!("example pair sim {sim}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let random = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        let n = rng.gen_range(3..=12);
        (0..n).map(|_| rng.gen_range(0..12)).collect()
    };
    let bases: Vec<Vec<u8>> = (0..200).map(|_| random(&mut rng)).collect();
    let mutate = |s: &[u8], rng: &mut ChaCha8Rng| -> Vec<u8> {
        let mut v = s.to_vec();
        for _ in 0..rng.gen_range(0..4) {
            match rng.gen_range(0..3) {
                0 if v.len() > 1 => {
                    v.remove(rng.gen_range(0..v.len()));
                }
                1 => v.insert(rng.gen_range(0..=v.len()), rng.gen_range(0..12)),
                _ => {
                    let i = rng.gen_range(0..v.len());
                    v[i] = rng.gen_range(0..12);
                }
            }
        }
        v
    };
    let records: Vec<SentenceRecord> = (0..1000)
        .map(|i| {
            let s = if i % 2 == 0 { mutate(&bases[rng.gen_range(0..bases.len())], &mut rng) } else { random(&mut rng) };
            SentenceRecord {
                id: i,
                domain: "r".into(),
                src: toks(&s),
                tgt: toks(&s),
            }
        })
        .collect();
    let queries: Vec<Vec<String>> = (0..1000)
        .map(|i| {
            let s = if i % 2 == 0 { mutate(&bases[rng.gen_range(0..bases.len())], &mut rng) } else { random(&mut rng) };
            toks(&s)
        })
        .collect();
    let index = NGramIndex::build(&records, 3).map_err(|e| e.to_string())?;
    let windows = [
        Window::new(3, 0.4, 1.0).unwrap(),
        Window::new(3, 0.6, 1.5).unwrap(),
        Window::new(10, 0.0, 1.5).unwrap(),
    ];
    let mut nonempty = 0;
    for w in windows {
        for (qi, q) in queries.iter().enumerate() {
            let exclude = (qi % 3 == 0).then_some(qi as u64);
            let got = index.retrieve(q, w, exclude);
            let want = index.exhaustive(q, w, exclude);
            ensure(got == want, format!("query {qi} differs under {w:?}"))?;
            nonempty += usize::from(!got.is_empty());
        }
    }
    within(start, 60.0)?;
    Ok(format!("sim {sim:.4}, 3000 query/window runs identical, {nonempty} with matches"))
}

// ---------------------------------------------------------------------------

fn all_words(alpha: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<u8>> = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<u8>> = frontier
            .iter()
            .flat_map(|w| {
                (0..alpha).map(move |a| {
                    let mut v = w.clone();
                    v.push(a);
                    v
                })
            })
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// The recursive definition, memoized on suffix positions.
fn recursive_ed(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut [[u8; 8]; 8]) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if memo[i][j] != u8::MAX {
            return memo[i][j] as usize;
        }
        let v = (go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]))
            .min(go(a, b, i + 1, j, memo) + 1)
            .min(go(a, b, i, j + 1, memo) + 1);
        memo[i][j] = v as u8;
        v
    }
    go(a, b, 0, 0, &mut [[u8::MAX; 8]; 8])
}

fn edit_distance_oracle() -> Check {
    let start = Instant::now();
    let words = all_words(3, 7);
    let mut pairs = 0u64;
    for a in &words {
        for b in &words {
            let (got, want) = (edit_distance(a, b), recursive_ed(a, b));
            ensure(got == want, format!("{a:?} vs {b:?}: {got} != {want}"))?;
            pairs += 1;
        }
    }
    within(start, 60.0)?;
    Ok(format!("{pairs} pairs agree"))
}

// ---------------------------------------------------------------------------

const PLH: u8 = u8::MAX;

fn round_trip(y: &[u8], t: &[u8]) -> Result<Vec<u8>, String> {
    let e = |e: tmlevt::edit_calculus::EditError| e.to_string();
    let kept = apply_delete(y, &oracle_delete_labels(y, t)).map_err(e)?;
    let labels = oracle_insertion_labels(&kept, t).map_err(e)?;
    let with = apply_placeholders(&kept, &labels.counts, &PLH).map_err(e)?;
    fill_tokens(&with, &labels.fills, &PLH).map_err(e)
}

fn oracle_round_trip() -> Check {
    let start = Instant::now();
    let words = all_words(3, 5);
    for y in &words {
        for t in &words {
            ensure(round_trip(y, t)? == *t, format!("round trip {y:?} -> {t:?}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        let n = rng.gen_range(0..=14);
        (0..n).map(|_| rng.gen_range(0..6)).collect()
    };
    let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..10_000).map(|_| (draw(&mut rng), draw(&mut rng))).collect();
    for (y, t) in &pairs {
        ensure(round_trip(y, t)? == *t, format!("round trip {y:?} -> {t:?}"))?;
    }

    // ids offset past the reserved range
    let ids = |v: &[u8]| -> Vec<u32> { v.iter().map(|&b| NUM_SPECIAL as u32 + u32::from(b)).collect() };
    let vocab = NUM_SPECIAL + 6;
    let items: Vec<DecodeItem> = pairs
        .iter()
        .enumerate()
        .map(|(i, (y, t))| DecodeItem {
            id: i as u64,
            encoder_input: vec![NUM_SPECIAL as u32],
            init: if i % 10 == 0 { vec![] } else { ids(y) },
            reference: Some(ids(t)),
        })
        .collect();
    let policy = OraclePolicy::new(vocab, 16);
    let out = batch_decode(&policy, &items, &DecodeConfig::default()).map_err(|e| e.to_string())?;
    let mut worst = 0;
    for (it, (hyp, trace)) in items.iter().zip(&out) {
        ensure(Some(hyp) == it.reference.as_ref(), format!("oracle decode of item {}", it.id))?;
        worst = worst.max(trace.iterations);
    }
    ensure(worst <= 2, format!("oracle needed {worst} iterations"))?;
    let (hyps, refs): (Vec<Vec<u32>>, Vec<Vec<u32>>) = items
        .iter()
        .zip(&out)
        .filter(|(it, _)| it.reference.as_ref().is_some_and(|r| !r.is_empty()))
        .map(|(it, (h, _))| (h.clone(), it.reference.clone().unwrap()))
        .unzip();
    let bleu = corpus_bleu(&hyps, &refs).map_err(|e| e.to_string())?;
    ensure((bleu - 100.0).abs() < 1e-9, format!("oracle BLEU {bleu}"))?;
    within(start, 120.0)?;
    Ok(format!(
        "{} enumerated + 10000 random pairs; oracle BLEU {bleu:.1}, max {worst} iterations",
        words.len() * words.len()
    ))
}

// ---------------------------------------------------------------------------

const GC_VOCAB: usize = 40;

fn gc_batch(seed: u64) -> Vec<RollInExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let n = rng.gen_range(3..=7);
        (0..n).map(|_| rng.gen_range(NUM_SPECIAL as u32..GC_VOCAB as u32)).collect()
    };
    let cfg = ExampleConfig {
        self_pred: false,
        ..Default::default()
    };
    let mut batch = Vec::new();
    while batch.len() < 3 {
        let src = sentence(&mut rng);
        let t = sentence(&mut rng);
        let ex = if batch.len() < 2 {
            let tm: Vec<u32> = t
                .iter()
                .map(|&w| if rng.gen_bool(0.3) { rng.gen_range(NUM_SPECIAL as u32..GC_VOCAB as u32) } else { w })
                .collect();
            make_tm_example(&src, &t, &tm, &cfg, &mut rng, None)
        } else {
            make_vanilla_example(&src, &t, cfg.k_max, &mut rng)
        };
        batch.push(ex.expect("valid example"));
    }
    batch
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for b in 0..3u64 {
        let model = Model::<f64>::new(ModelConfig::toy(GC_VOCAB), 100 + b).map_err(|e| e.to_string())?;
        let batch = gc_batch(b);
        let mut obj = ModelObjective::new(model, &batch, LossOptions::default()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(7 + b);
        let idx = sample_indices(obj.model.num_params(), 200, &mut rng);
        let report = grad_check(&mut obj, &idx, 1e-4).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
    }
    ensure(worst < 1e-3, format!("max relative error {worst:.2e}"))?;
    within(start, 300.0)?;
    Ok(format!("{checked} parameters over 3 batches, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tmlevt"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
}

fn pipeline_once(dir: &Path) -> Result<(), String> {
    let common = [
        "--deterministic",
        "--seed",
        "5",
        "--set",
        "synth.n=2000",
        "--set",
        "split.high=100",
        "--set",
        "split.mid=100",
        "--set",
        "split.heldout=50",
        "--set",
        "training.steps=200",
        "--set",
        "training.rounds=1",
    ];
    let with = |extra: &[&'static str]| -> Vec<&str> { common.iter().chain(extra).copied().collect() };
    run_cli(dir, &with(&["synth", "--out", "corpus.jsonl"]))?;
    run_cli(dir, &with(&["index", "--corpus", "corpus.jsonl", "--out", "corpus.idx"]))?;
    run_cli(dir, &with(&["prepare", "--corpus", "corpus.jsonl", "--out-dir", "prep"]))?;
    run_cli(dir, &with(&["train", "--data", "prep", "--out", "model.ckpt"]))?;
    run_cli(dir, &with(&["decode", "--checkpoint", "model.ckpt", "--test", "prep/test.jsonl", "--out", "hyps.jsonl"]))?;
    run_cli(dir, &with(&["eval", "--test", "prep/test.jsonl", "--hyps", "hyps.jsonl", "--out", "report.json"]))
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline_once(a.path())?;
    pipeline_once(b.path())?;
    let files = [
        "corpus.jsonl",
        "corpus.idx",
        "prep/train.jsonl",
        "model.ckpt",
        "model.loss.csv",
        "hyps.jsonl",
        "hyps.jsonl.meta.json",
        "report.json",
    ];
    for f in files {
        let x = std::fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(x == y, format!("{f} differs between runs"))?;
    }
    Ok(format!("{} artifacts bit-identical", files.len()))
}

// ---------------------------------------------------------------------------

/// Models trained once and shared by the phenomenon checks.
struct Trained {
    name: &'static str,
    cfg: RunConfig,
    prepared: std::rc::Rc<Prepared>,
    ckpt: Checkpoint<f32>,
    train_secs: f64,
}

impl Trained {
    fn policy(&self) -> NeuralPolicy {
        NeuralPolicy::new(self.ckpt.model.clone(), self.ckpt.meta.flags)
    }

    fn evaluate(&self, items: &[TestItem], use_tm: bool) -> Result<EvalReport, String> {
        let mut cfg = self.cfg.clone();
        cfg.decode.use_tm = use_tm;
        let e = |e: tmlevt_cli::CliError| e.to_string();
        let dec = pipeline::decode_items(items, &self.prepared.vocab, self.ckpt.meta.flags, &cfg).map_err(e)?;
        let run = pipeline::run_decode(&self.policy(), &dec, &self.prepared.vocab, &cfg, false).map_err(e)?;
        pipeline::evaluate(items, &run.lines(&dec), None, None, &cfg).map_err(e)
    }

    fn diagnose(&self) -> Result<DiagnosticReport, String> {
        pipeline::diagnose(&self.policy(), &self.prepared.test, &self.prepared.vocab, self.ckpt.meta.flags.src_tm, &self.cfg)
            .map_err(|e| e.to_string())
    }
}

const VARIANTS: [(&str, &str); 5] = [
    ("full", ""),
    ("-tgt TM", "training.tgt_tm"),
    ("-src TM", "training.src_tm"),
    ("-final-del", "training.final_del"),
    ("-self-pred", "training.self_pred"),
];

fn train_models() -> Result<Vec<Trained>, String> {
    let base = RunConfig::default();
    let records = generate_synthetic(&Grammar::builtin(), base.synth_n, base.seed).map_err(|e| e.to_string())?;
    let mut out: Vec<Trained> = Vec::new();
    for (name, toggle) in VARIANTS {
        let mut cfg = base.clone();
        if !toggle.is_empty() {
            cfg.set(toggle, "false").map_err(|e| e.to_string())?;
        }
        // trainer-only toggles reuse the prepared data
        let shared = out
            .iter()
            .find(|t| t.cfg.training.src_tm == cfg.training.src_tm && t.cfg.training.tgt_tm == cfg.training.tgt_tm);
        let prepared = match shared {
            Some(t) => t.prepared.clone(),
            None => std::rc::Rc::new(pipeline::prepare(&records, None, &cfg).map_err(|e| e.to_string())?),
        };
        let start = Instant::now();
        let ckpt = pipeline::train(&prepared.examples, &prepared.vocab, &cfg, |_| {}).map_err(|e| e.to_string())?;
        let train_secs = start.elapsed().as_secs_f64();
        eprintln!("trained {name} in {train_secs:.0}s");
        out.push(Trained {
            name,
            cfg,
            prepared,
            ckpt,
            train_secs,
        });
    }
    Ok(out)
}

fn high_bucket(t: &Trained) -> Vec<TestItem> {
    t.prepared.test.iter().filter(|i| i.split == "high").cloned().collect()
}

fn synthetic_phenomena(models: &[Trained]) -> Check {
    let full = &models[0];
    let p = &full.prepared;
    ensure(p.vocab.len() <= 300, format!("vocabulary {}", p.vocab.len()))?;
    ensure((4500..=5500).contains(&p.manifest.records), format!("{} records", p.manifest.records))?;
    ensure(full.train_secs <= 1800.0, format!("training took {:.0}s", full.train_secs))?;
    let high = high_bucket(full);
    let with = full.evaluate(&high, true)?;
    let without = full.evaluate(&high, false)?;
    let copy = {
        let policy = CopyPolicy::new(p.vocab.len(), full.cfg.model.k_max);
        let e = |e: tmlevt_cli::CliError| e.to_string();
        let dec = pipeline::decode_items(&high, &p.vocab, full.ckpt.meta.flags, &full.cfg).map_err(e)?;
        let run = pipeline::run_decode(&policy, &dec, &p.vocab, &full.cfg, false).map_err(e)?;
        pipeline::evaluate(&high, &run.lines(&dec), None, None, &full.cfg).map_err(e)?
    };
    let it_with = with.mean_iterations.unwrap_or(f64::NAN);
    let it_without = without.mean_iterations.unwrap_or(f64::NAN);
    let unrel = with.unrelated_rate.unwrap_or(f64::NAN);
    let detail = format!(
        "high bucket n={}: BLEU w/ TM {:.2}, w/o TM {:.2}, copy {:.2}; iterations {:.2} vs {:.2}; unrelated {:.2}%; vocab {}, train {:.0}s",
        high.len(),
        with.bleu,
        without.bleu,
        copy.bleu,
        it_with,
        it_without,
        unrel,
        p.vocab.len(),
        full.train_secs
    );
    ensure(with.bleu >= without.bleu + 5.0, format!("(a) w/ TM vs w/o TM; {detail}"))?;
    ensure(with.bleu > copy.bleu, format!("(a) w/ TM vs copy; {detail}"))?;
    ensure(it_with <= 0.9 * it_without, format!("(b) iterations; {detail}"))?;
    ensure(unrel < 100.0, format!("(c) unrelated rate; {detail}"))?;
    Ok(detail)
}

fn random_sent_row(r: &DiagnosticReport) -> Result<(f64, f64), String> {
    let row = r
        .rows
        .iter()
        .find(|row| row.mode == InitMode::RandomSent)
        .ok_or("no random_sent row")?;
    Ok((row.output_vs_init.ok_or("no output_vs_init")?, row.output_vs_ref))
}

fn table1_phenomenon(models: &[Trained]) -> Check {
    let full = &models[0];
    let vanilla = models.iter().find(|m| m.name == "-tgt TM").ok_or("no vanilla model")?;
    let (tm_init, tm_ref) = random_sent_row(&full.diagnose()?)?;
    let (v_init, v_ref) = random_sent_row(&vanilla.diagnose()?)?;
    let detail = format!(
        "random_sent output-vs-init vanilla {v_init:.2} vs TM-LevT {tm_init:.2}; output-vs-ref TM-LevT {tm_ref:.2} vs vanilla {v_ref:.2}"
    );
    ensure(v_init >= tm_init + 20.0, detail.clone())?;
    ensure(tm_ref > v_ref, detail.clone())?;
    Ok(detail)
}

fn ablations(models: &[Trained]) -> Check {
    let mut echoes = BTreeSet::new();
    let mut scores = Vec::new();
    for m in models {
        let report = m.evaluate(&m.prepared.test, false)?;
        echoes.insert(report.config.to_string());
        scores.push((m.name, report.bleu));
    }
    ensure(echoes.len() == models.len(), "config echoes are not distinguishable")?;
    let detail = scores
        .iter()
        .map(|(n, b)| format!("{n} {b:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    let full = scores[0].1;
    let no_fd = scores.iter().find(|(n, _)| *n == "-final-del").ok_or("no -final-del run")?.1;
    ensure(no_fd < full, format!("-final-del does not degrade: w/o-TM BLEU {detail}"))?;
    Ok(format!("w/o-TM BLEU {detail}"))
}

// ---------------------------------------------------------------------------

/// Independent multiset oracle: an occurrence is unrelated once the reference's
/// copies of that word are used up, and survives while the hypothesis has a
/// copy beyond the reference's.
fn counting_oracle(hyps: &[Vec<u8>], tms: &[Vec<u8>], refs: &[Vec<u8>]) -> Option<f64> {
    let (mut total, mut kept) = (0usize, 0usize);
    for ((h, t), r) in hyps.iter().zip(tms).zip(refs) {
        let mut ref_left = [0usize; 256];
        let mut hyp_extra = [0isize; 256];
        for &w in r {
            ref_left[w as usize] += 1;
            hyp_extra[w as usize] -= 1;
        }
        for &w in h {
            hyp_extra[w as usize] += 1;
        }
        for &w in t {
            let w = w as usize;
            if ref_left[w] > 0 {
                ref_left[w] -= 1;
                continue;
            }
            total += 1;
            if hyp_extra[w] > 0 {
                hyp_extra[w] -= 1;
                kept += 1;
            }
        }
    }
    (total > 0).then(|| 100.0 * kept as f64 / total as f64)
}

fn metric_self_tests() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draw = |rng: &mut ChaCha8Rng, lo: usize| -> Vec<u8> {
        let n = rng.gen_range(lo..10);
        (0..n).map(|_| rng.gen_range(0..7)).collect()
    };
    for _ in 0..200 {
        let n = rng.gen_range(1..6);
        let x: Vec<Vec<u8>> = (0..n).map(|_| draw(&mut rng, 1)).collect();
        let b = corpus_bleu(&x, &x).map_err(|e| e.to_string())?;
        ensure((b - 100.0).abs() < 1e-9, format!("bleu(x, x) = {b}"))?;
    }
    let w = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let hand = corpus_bleu(&[w("a b c d")], &[w("a b c e")]).map_err(|e| e.to_string())?;
    // precisions 3/4, 2/3, 1/2 and a smoothed 1/(2*1) on the 4-grams, no brevity penalty
    let expected = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
    ensure((hand - expected).abs() < 1e-9, format!("hand example {hand} vs {expected}"))?;
    for i in 0..1000 {
        let n = rng.gen_range(1..4);
        let mut triple = (vec![], vec![], vec![]);
        for _ in 0..n {
            triple.0.push(draw(&mut rng, 0));
            triple.1.push(draw(&mut rng, 0));
            triple.2.push(draw(&mut rng, 0));
        }
        let (h, t, r) = triple;
        let got = unrelated_rate(&h, &t, &r).map_err(|e| e.to_string())?;
        ensure(got == counting_oracle(&h, &t, &r), format!("unrelated rate mismatch on triple {i}"))?;
    }
    Ok(format!("hand example {hand:.9}; 1000 unrelated-rate triples agree"))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // `cargo test -- --list` and filters come through here too
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }

    let mut failed = 0;
    let mut report = |n: usize, name: &str, start: Instant, r: Check| {
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {n} {name}: PASS ({d}) [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d}) [{secs:.1}s]")
            }
        }
    };
    let quick: [(usize, &str, fn() -> Check); 6] = [
        (1, "retrieval exactness", retrieval_exactness),
        (2, "edit distance oracle", edit_distance_oracle),
        (3, "oracle round trip", oracle_round_trip),
        (4, "gradient check", gradient_correctness),
        (5, "determinism", determinism),
        (9, "metric self-tests", metric_self_tests),
    ];
    for (n, name, f) in quick {
        let t = Instant::now();
        report(n, name, t, guarded(f));
    }

    let models = match panic::catch_unwind(train_models) {
        Ok(r) => r,
        Err(_) => Err("training panicked".to_string()),
    };
    let phenomena: [(usize, &str, fn(&[Trained]) -> Check); 3] = [
        (6, "synthetic phenomena", synthetic_phenomena),
        (7, "random-init diagnostics", table1_phenomenon),
        (8, "ablations", ablations),
    ];
    for (n, name, f) in phenomena {
        let t = Instant::now();
        let r = match &models {
            Ok(m) => guarded(|| f(m)),
            Err(e) => Err(format!("model training failed: {e}")),
        };
        report(n, name, t, r);
    }

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
