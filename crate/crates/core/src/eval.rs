//! Metrics and experiment harnesses.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenId;
use crate::decoder::{batch_decode, decode, make_init, DecodeConfig, DecodeError, DecodeItem, DecodeTrace, InitMode};
use crate::edit_calculus::tm_encoder_input;
use crate::policy::EditPolicy;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: {left} vs {right} entries")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("no sentences to score")]
    Empty,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

const MAX_ORDER: usize = 4;

fn ngram_counts<S: Eq + Hash>(toks: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for g in toks.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Aggregated corpus statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

pub fn bleu_stats<S: Eq + Hash>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuStats, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            what: "hypotheses and references",
            left: hyps.len(),
            right: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut st = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        st.hyp_len += h.len();
        st.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            st.totals[n - 1] += h.len().saturating_sub(n - 1);
            st.matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    Ok(st)
}

impl BleuStats {
    /// BLEU with exponential smoothing of zero precisions. Orders for which the
    /// hypotheses hold no n-grams at all are left out of the geometric mean.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.iter().all(|&m| m == 0) {
            return 0.0;
        }
        let mut smooth = 1.0;
        let mut log_sum = 0.0;
        let mut order = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                break;
            }
            order += 1;
            let p = if self.matches[n] == 0 {
                smooth *= 2.0;
                1.0 / (smooth * self.totals[n] as f64)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * (log_sum / order as f64).exp()
    }
}

/// Corpus BLEU in `[0, 100]`.
pub fn corpus_bleu<S: Eq + Hash>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64, EvalError> {
    Ok(bleu_stats(hyps, refs)?.score())
}

fn counts<S: Eq + Hash>(v: &[S]) -> HashMap<&S, usize> {
    let mut m = HashMap::new();
    for x in v {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// Unrelated TM token occurrences (in the TM target beyond the reference's
/// count) and how many of them survive into the hypothesis, again counted
/// beyond the reference's count.
pub fn unrelated_counts<S: Eq + Hash>(hyp: &[S], tm: &[S], reference: &[S]) -> (usize, usize) {
    let (ch, ct, cr) = (counts(hyp), counts(tm), counts(reference));
    let mut total = 0;
    let mut kept = 0;
    for (w, &c) in &ct {
        let r = cr.get(w).copied().unwrap_or(0);
        let u = c.saturating_sub(r);
        total += u;
        kept += u.min(ch.get(w).copied().unwrap_or(0).saturating_sub(r));
    }
    (total, kept)
}

/// Percentage of unrelated TM tokens kept; `None` when there are none.
pub fn unrelated_rate<S: Eq + Hash>(hyps: &[Vec<S>], tms: &[Vec<S>], refs: &[Vec<S>]) -> Result<Option<f64>, EvalError> {
    for (what, n) in [("TM targets", tms.len()), ("references", refs.len())] {
        if n != hyps.len() {
            return Err(EvalError::LengthMismatch {
                what,
                left: hyps.len(),
                right: n,
            });
        }
    }
    let (mut total, mut kept) = (0, 0);
    for ((h, t), r) in hyps.iter().zip(tms).zip(refs) {
        let (a, b) = unrelated_counts(h, t, r);
        total += a;
        kept += b;
    }
    Ok((total > 0).then(|| 100.0 * kept as f64 / total as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub mean: f64,
    pub histogram: BTreeMap<usize, usize>,
}

pub fn iteration_stats<'a>(traces: impl IntoIterator<Item = &'a DecodeTrace>) -> Option<IterationStats> {
    iteration_stats_from(traces.into_iter().map(|t| t.iterations))
}

pub fn iteration_stats_from(iters: impl IntoIterator<Item = usize>) -> Option<IterationStats> {
    let mut histogram = BTreeMap::new();
    let (mut n, mut sum) = (0usize, 0usize);
    for it in iters {
        *histogram.entry(it).or_insert(0) += 1;
        n += 1;
        sum += it;
    }
    (n > 0).then(|| IterationStats {
        mean: sum as f64 / n as f64,
        histogram,
    })
}

/// Half-open similarity ranges `[lo, hi)`, the last one closed at 1.
pub fn bucket_edges(start: f64, width: f64) -> Vec<(f64, f64)> {
    let mut edges = vec![(0.0, start)];
    let steps = ((1.0 - start) / width).round() as usize;
    for i in 0..steps {
        let lo = start + i as f64 * width;
        let hi = if i + 1 == steps { 1.0 } else { start + (i + 1) as f64 * width };
        edges.push(((lo * 1e6).round() / 1e6, (hi * 1e6).round() / 1e6));
    }
    edges
}

pub fn bucket_index(edges: &[(f64, f64)], sim: f64) -> usize {
    edges
        .iter()
        .position(|&(lo, hi)| sim >= lo && sim < hi)
        .unwrap_or(edges.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket_lo: f64,
    pub bucket_hi: f64,
    pub n: usize,
    pub bleu_copy: Option<f64>,
    pub bleu_no_tm: Option<f64>,
    pub bleu_tm: Option<f64>,
}

/// Per-bucket BLEU of the copy baseline and of the two systems. Empty
/// buckets and absent systems report `None`.
pub fn bucketed_eval<S: Eq + Hash + Clone>(
    sims: &[f64],
    refs: &[Vec<S>],
    copy: &[Vec<S>],
    no_tm: Option<&[Vec<S>]>,
    tm: Option<&[Vec<S>]>,
    edges: &[(f64, f64)],
) -> Result<Vec<BucketRow>, EvalError> {
    let n = sims.len();
    for (what, len) in [
        ("references", refs.len()),
        ("copy outputs", copy.len()),
        ("outputs without TM", no_tm.map_or(n, <[_]>::len)),
        ("outputs with TM", tm.map_or(n, <[_]>::len)),
    ] {
        if len != n {
            return Err(EvalError::LengthMismatch { what, left: n, right: len });
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); edges.len()];
    for (i, &s) in sims.iter().enumerate() {
        members[bucket_index(edges, s)].push(i);
    }
    let pick = |sys: &[Vec<S>], idx: &[usize]| -> Vec<Vec<S>> { idx.iter().map(|&i| sys[i].clone()).collect() };
    edges
        .iter()
        .zip(&members)
        .map(|(&(lo, hi), idx)| {
            let r = pick(refs, idx);
            let score = |sys: Option<&[Vec<S>]>| -> Result<Option<f64>, EvalError> {
                match sys {
                    Some(s) if !idx.is_empty() => Ok(Some(corpus_bleu(&pick(s, idx), &r)?)),
                    _ => Ok(None),
                }
            };
            Ok(BucketRow {
                bucket_lo: lo,
                bucket_hi: hi,
                n: idx.len(),
                bleu_copy: score(Some(copy))?,
                bleu_no_tm: score(no_tm)?,
                bleu_tm: score(tm)?,
            })
        })
        .collect()
}

pub fn bucket_csv(rows: &[BucketRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("bucket_lo,bucket_hi,n,bleu_copy,bleu_no_tm,bleu_tm\n");
    for r in rows {
        s.push_str(&format!(
            "{:.2},{:.2},{},{},{},{}\n",
            r.bucket_lo,
            r.bucket_hi,
            r.n,
            cell(r.bleu_copy),
            cell(r.bleu_no_tm),
            cell(r.bleu_tm)
        ));
    }
    s
}

/// A test sentence with its best TM match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: u64,
    pub domain: String,
    pub src: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    pub tm_tgt: Option<Vec<TokenId>>,
    pub sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub mode: InitMode,
    /// BLEU of the initial targets against the references (`None` for empty starts).
    pub init_vs_ref: Option<f64>,
    pub output_vs_ref: f64,
    pub output_vs_init: Option<f64>,
}

/// Decode every item from empty, random-sentence and shuffled-reference
/// starts and compare outputs with both references and starting points.
/// Random sentences are drawn from `pool` minus the item's own reference.
/// With `src_tm`, the starting sentence also goes on the encoder side.
pub fn diagnostic_table1<R: Rng + ?Sized>(
    policy: &dyn EditPolicy,
    items: &[EvalItem],
    pool: &[Vec<TokenId>],
    src_tm: bool,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<DiagnosticRow>, EvalError> {
    let refs: Vec<Vec<TokenId>> = items.iter().map(|i| i.reference.clone()).collect();
    let mut rows = Vec::new();
    for mode in [InitMode::Empty, InitMode::RandomSent, InitMode::ShuffleRef] {
        let mut inits = Vec::with_capacity(items.len());
        let mut dec_items = Vec::with_capacity(items.len());
        for it in items {
            let init = if mode == InitMode::RandomSent {
                let others: Vec<Vec<TokenId>> = pool.iter().filter(|s| **s != it.reference).cloned().collect();
                make_init(mode, None, &it.reference, &others, None, rng)?
            } else {
                make_init(mode, None, &it.reference, pool, None, rng)?
            };
            let encoder_input = if src_tm && !init.is_empty() {
                tm_encoder_input(&it.src, &init)
            } else {
                it.src.clone()
            };
            dec_items.push(DecodeItem {
                id: it.id,
                encoder_input,
                init: init.clone(),
                reference: Some(it.reference.clone()),
            });
            inits.push(init);
        }
        let outs: Vec<Vec<TokenId>> = batch_decode(policy, &dec_items, &DecodeConfig { init_mode: mode, ..*cfg })?
            .into_iter()
            .map(|(h, _)| h)
            .collect();
        let empty = mode == InitMode::Empty;
        rows.push(DiagnosticRow {
            mode,
            init_vs_ref: if empty { None } else { Some(corpus_bleu(&inits, &refs)?) },
            output_vs_ref: corpus_bleu(&outs, &refs)?,
            output_vs_init: if empty { None } else { Some(corpus_bleu(&outs, &inits)?) },
        });
    }
    Ok(rows)
}

/// Mean wall-clock milliseconds per sentence of a sequential run, after a
/// warm-up pass over the first few items.
pub fn timing_harness(policy: &dyn EditPolicy, items: &[DecodeItem], cfg: &DecodeConfig) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    for it in items.iter().take(8) {
        decode(policy, it, cfg)?;
    }
    let start = Instant::now();
    for it in items {
        decode(policy, it, cfg)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1000.0 / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub artifact_version: String,
    pub n: usize,
    pub bleu: f64,
    /// `None` when the TM targets hold no unrelated tokens.
    pub unrelated_rate: Option<f64>,
    pub unrelated_counting: String,
    pub mean_iterations: Option<f64>,
    pub iteration_histogram: BTreeMap<usize, usize>,
    pub per_domain: BTreeMap<String, f64>,
    pub buckets: Vec<BucketRow>,
    pub timing_ms: Option<f64>,
    pub config: serde_json::Value,
}

pub const UNRELATED_COUNTING: &str = "multiset: TM occurrences beyond the reference count, matched against hypothesis occurrences beyond the reference count";

/// Per-domain corpus BLEU.
pub fn per_domain_bleu<S: Eq + Hash + Clone>(
    domains: &[String],
    hyps: &[Vec<S>],
    refs: &[Vec<S>],
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in domains.iter().enumerate() {
        groups.entry(d.as_str()).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(d, idx)| {
            let h: Vec<Vec<S>> = idx.iter().map(|&i| hyps[i].clone()).collect();
            let r: Vec<Vec<S>> = idx.iter().map(|&i| refs[i].clone()).collect();
            Ok((d.to_string(), corpus_bleu(&h, &r)?))
        })
        .collect()
}
