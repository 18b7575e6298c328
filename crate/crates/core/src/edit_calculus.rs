//! Edit operations, minimal-edit alignments, oracle labels and roll-in
//! example generation.
//!
//! Sequences here are interior target tokens: BOS and EOS are added by the
//! decoder state and never take part in the calculus. A sequence of length
//! `n` has `n + 1` gaps, the first one after BOS and the last one before EOS.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, PLH_ID, SEP_ID};

/// Default cap on the number of placeholders per gap.
pub const DEFAULT_K_MAX: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EditError {
    #[error("{what}: expected {expected} entries, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sequence is not a subsequence of the reference")]
    NotSubsequence,
    #[error("gap needs {count} placeholders, above the cap of {k_max}")]
    PlaceholderOverflow { count: usize, k_max: usize },
    #[error("self-predicted deletions requested but no model was provided")]
    MissingModel,
    #[error("translation memory target is empty")]
    EmptyTm,
}

/// Matched index pairs `(i into y, j into t)` of one minimal edit script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Alignment {
    pub fn matched_y(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &(i, _) in &self.pairs {
            m[i] = true;
        }
        m
    }
}

/// `suffix[i][j]` = edit distance between `y[i..]` and `t[j..]`.
fn suffix_distances<T: PartialEq>(y: &[T], t: &[T]) -> Vec<Vec<usize>> {
    let (n, m) = (y.len(), t.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            d[i][j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let sub = d[i + 1][j + 1] + usize::from(y[i] != t[j]);
                sub.min(d[i + 1][j] + 1).min(d[i][j + 1] + 1)
            };
        }
    }
    d
}

/// The leftmost minimal-edit alignment.
///
/// A set of monotone match pairs costs the sum over the unmatched stretches
/// between consecutive pairs of `max(stretch in y, stretch in t)`; the
/// alignment is minimal when that cost equals the edit distance. Among
/// minimal alignments the pair list is the lexicographically smallest one,
/// where having another match ranks before ending.
pub fn align<T: PartialEq>(y: &[T], t: &[T]) -> Alignment {
    let (n, m) = (y.len(), t.len());
    let s = suffix_distances(y, t);
    let total = s[0][0];
    let mut pairs = Vec::new();
    let (mut next_i, mut next_j) = (0usize, 0usize);
    let mut cost = 0usize;
    'outer: loop {
        for i in next_i..n {
            for j in next_j..m {
                if y[i] != t[j] {
                    continue;
                }
                let gap = (i - next_i).max(j - next_j);
                if cost + gap + s[i + 1][j + 1] == total {
                    pairs.push((i, j));
                    cost += gap;
                    next_i = i + 1;
                    next_j = j + 1;
                    continue 'outer;
                }
            }
        }
        debug_assert_eq!(cost + (n - next_i).max(m - next_j), total);
        break;
    }
    Alignment { pairs }
}

/// Flag every token of `y` that the alignment with `t` leaves unmatched.
pub fn oracle_delete_labels<T: PartialEq>(y: &[T], t: &[T]) -> Vec<bool> {
    align(y, t).matched_y(y.len()).into_iter().map(|m| !m).collect()
}

pub fn is_subsequence<T: PartialEq>(sub: &[T], seq: &[T]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// Gap counts and fill tokens turning a subsequence back into the reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionLabels<T> {
    pub counts: Vec<usize>,
    pub fills: Vec<T>,
}

/// Labels from the leftmost (greedy) embedding of `y_sub` into `t`.
pub fn oracle_insertion_labels<T: PartialEq + Clone>(
    y_sub: &[T],
    t: &[T],
) -> Result<InsertionLabels<T>, EditError> {
    let mut counts = Vec::with_capacity(y_sub.len() + 1);
    let mut fills = Vec::with_capacity(t.len() - y_sub.len().min(t.len()));
    let mut j = 0usize;
    for tok in y_sub {
        let start = j;
        while j < t.len() && t[j] != *tok {
            j += 1;
        }
        if j == t.len() {
            return Err(EditError::NotSubsequence);
        }
        counts.push(j - start);
        fills.extend_from_slice(&t[start..j]);
        j += 1;
    }
    counts.push(t.len() - j);
    fills.extend_from_slice(&t[j..]);
    Ok(InsertionLabels { counts, fills })
}

/// Insertion labels for an arbitrary `y`: the unmatched reference tokens
/// between consecutive aligned pairs. Equal to [`oracle_insertion_labels`]
/// whenever `y` is a subsequence of `t` and the leftmost embedding is the
/// leftmost alignment.
pub fn aligned_insertion_labels<T: PartialEq + Clone>(y: &[T], t: &[T]) -> InsertionLabels<T> {
    let al = align(y, t);
    let mut counts = vec![0usize; y.len() + 1];
    let mut fills = Vec::new();
    let mut next_j = 0usize;
    for &(i, j) in &al.pairs {
        // unmatched t tokens before this pair go in the gap before y[i]
        counts[i] += j - next_j;
        fills.extend_from_slice(&t[next_j..j]);
        next_j = j + 1;
    }
    counts[y.len()] += t.len() - next_j;
    fills.extend_from_slice(&t[next_j..]);
    InsertionLabels { counts, fills }
}

pub fn apply_delete<T: Clone>(y: &[T], flags: &[bool]) -> Result<Vec<T>, EditError> {
    if flags.len() != y.len() {
        return Err(EditError::Shape {
            what: "delete flags",
            expected: y.len(),
            got: flags.len(),
        });
    }
    Ok(y.iter()
        .zip(flags)
        .filter(|(_, &d)| !d)
        .map(|(x, _)| x.clone())
        .collect())
}

pub fn apply_placeholders<T: Clone>(y: &[T], counts: &[usize], plh: &T) -> Result<Vec<T>, EditError> {
    if counts.len() != y.len() + 1 {
        return Err(EditError::Shape {
            what: "placeholder counts",
            expected: y.len() + 1,
            got: counts.len(),
        });
    }
    let mut out = Vec::with_capacity(y.len() + counts.iter().sum::<usize>());
    for (i, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(plh.clone(), c));
        if let Some(tok) = y.get(i) {
            out.push(tok.clone());
        }
    }
    Ok(out)
}

/// Replace placeholders left to right.
pub fn fill_tokens<T: Clone + PartialEq>(y: &[T], tokens: &[T], plh: &T) -> Result<Vec<T>, EditError> {
    let holes = y.iter().filter(|x| *x == plh).count();
    if holes != tokens.len() {
        return Err(EditError::Shape {
            what: "fill tokens",
            expected: holes,
            got: tokens.len(),
        });
    }
    let mut fills = tokens.iter();
    Ok(y.iter()
        .map(|x| if x == plh { fills.next().expect("counted").clone() } else { x.clone() })
        .collect())
}

/// Drop a uniformly drawn number of tokens (0..=|t|) at uniformly chosen positions.
pub fn sample_noised_subsequence<T: Clone, R: Rng + ?Sized>(t: &[T], rng: &mut R) -> Vec<T> {
    let drop = rng.gen_range(0..=t.len());
    let mut dropped = vec![false; t.len()];
    for i in index::sample(rng, t.len(), drop).iter() {
        dropped[i] = true;
    }
    t.iter()
        .zip(dropped)
        .filter(|(_, d)| !d)
        .map(|(x, _)| x.clone())
        .collect()
}

/// One training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollInExample {
    pub encoder_input: Vec<TokenId>,
    pub y0: Vec<TokenId>,
    /// Present only for examples that start from a TM target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_del_targets: Option<Vec<bool>>,
    pub y0_prime: Vec<TokenId>,
    pub plh_targets: Vec<usize>,
    pub tok_targets: Vec<TokenId>,
    /// Filled in online by the trainer.
    #[serde(skip)]
    pub final_del_targets: Option<Vec<bool>>,
}

impl RollInExample {
    pub fn is_tm(&self) -> bool {
        self.init_del_targets.is_some()
    }

    /// The reference the example reconstructs.
    pub fn reference(&self) -> Vec<TokenId> {
        let with = apply_placeholders(&self.y0_prime, &self.plh_targets, &PLH_ID).expect("consistent example");
        fill_tokens(&with, &self.tok_targets, &PLH_ID).expect("consistent example")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("example serializes")
    }
}

/// Model-side deletion decisions used by self-predicted roll-in.
pub trait DeletionPredictor {
    fn predict_deletions(&self, encoder_input: &[TokenId], y: &[TokenId]) -> Vec<bool>;
}

/// Training-data toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleConfig {
    /// Concatenate the TM target to the source on the encoder side.
    pub src_tm: bool,
    /// Start the decoder from the TM target.
    pub tgt_tm: bool,
    /// Also drop tokens the current model deletes when building `y0'`.
    pub self_pred: bool,
    pub k_max: usize,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        Self {
            src_tm: true,
            tgt_tm: true,
            self_pred: true,
            k_max: DEFAULT_K_MAX,
        }
    }
}

fn check_cap(counts: &[usize], k_max: usize) -> Result<(), EditError> {
    match counts.iter().copied().max() {
        Some(c) if c > k_max => Err(EditError::PlaceholderOverflow { count: c, k_max }),
        _ => Ok(()),
    }
}

pub fn tm_encoder_input(src: &[TokenId], tm: &[TokenId]) -> Vec<TokenId> {
    let mut enc = Vec::with_capacity(src.len() + 1 + tm.len());
    enc.extend_from_slice(src);
    enc.push(SEP_ID);
    enc.extend_from_slice(tm);
    enc
}

/// Standard roll-in: the decoder starts from a noised subsequence of `t`.
pub fn make_vanilla_example<R: Rng + ?Sized>(
    src: &[TokenId],
    t: &[TokenId],
    k_max: usize,
    rng: &mut R,
) -> Result<RollInExample, EditError> {
    let y0 = sample_noised_subsequence(t, rng);
    let labels = oracle_insertion_labels(&y0, t)?;
    check_cap(&labels.counts, k_max)?;
    Ok(RollInExample {
        encoder_input: src.to_vec(),
        y0: y0.clone(),
        init_del_targets: None,
        y0_prime: y0,
        plh_targets: labels.counts,
        tok_targets: labels.fills,
        final_del_targets: None,
    })
}

/// Roll-in from a TM match.
pub fn make_tm_example<R: Rng + ?Sized>(
    src: &[TokenId],
    t: &[TokenId],
    tm: &[TokenId],
    cfg: &ExampleConfig,
    rng: &mut R,
    model: Option<&dyn DeletionPredictor>,
) -> Result<RollInExample, EditError> {
    if tm.is_empty() {
        return Err(EditError::EmptyTm);
    }
    let encoder_input = if cfg.src_tm {
        tm_encoder_input(src, tm)
    } else {
        src.to_vec()
    };
    if !cfg.tgt_tm {
        let mut ex = make_vanilla_example(src, t, cfg.k_max, rng)?;
        ex.encoder_input = encoder_input;
        return Ok(ex);
    }
    let mut flags = oracle_delete_labels(tm, t);
    let init_del_targets = flags.clone();
    if cfg.self_pred {
        let model = model.ok_or(EditError::MissingModel)?;
        let predicted = model.predict_deletions(&encoder_input, tm);
        if predicted.len() != tm.len() {
            return Err(EditError::Shape {
                what: "predicted deletions",
                expected: tm.len(),
                got: predicted.len(),
            });
        }
        for (f, p) in flags.iter_mut().zip(predicted) {
            *f |= p;
        }
    }
    let y0_prime = apply_delete(tm, &flags)?;
    let labels = oracle_insertion_labels(&y0_prime, t)?;
    check_cap(&labels.counts, cfg.k_max)?;
    Ok(RollInExample {
        encoder_input,
        y0: tm.to_vec(),
        init_del_targets: Some(init_del_targets),
        y0_prime,
        plh_targets: labels.counts,
        tok_targets: labels.fills,
        final_del_targets: None,
    })
}

/// Flag filled positions whose predicted token differs from the oracle fill.
///
/// `with_plh` is the sequence after placeholder insertion; the result covers
/// the filled sequence of the same length.
pub fn make_final_del_targets<T: PartialEq>(
    with_plh: &[T],
    plh: &T,
    predicted: &[T],
    oracle: &[T],
) -> Result<Vec<bool>, EditError> {
    let holes = with_plh.iter().filter(|x| *x == plh).count();
    for (what, got) in [("predicted fills", predicted.len()), ("oracle fills", oracle.len())] {
        if got != holes {
            return Err(EditError::Shape {
                what,
                expected: holes,
                got,
            });
        }
    }
    let mut k = 0;
    Ok(with_plh
        .iter()
        .map(|x| {
            if x == plh {
                k += 1;
                predicted[k - 1] != oracle[k - 1]
            } else {
                false
            }
        })
        .collect())
}

/// Multi-task sampling: with probability `p`, and when a match exists, one TM
/// example per match (up to three); otherwise one standard example.
///
/// Examples whose gaps exceed the placeholder cap are skipped with a warning.
pub fn multitask_sample<R: Rng + ?Sized>(
    src: &[TokenId],
    t: &[TokenId],
    tm_targets: &[Vec<TokenId>],
    p: f64,
    cfg: &ExampleConfig,
    rng: &mut R,
    model: Option<&dyn DeletionPredictor>,
) -> Result<Vec<RollInExample>, EditError> {
    let use_tm = rng.gen_bool(p.clamp(0.0, 1.0)) && !tm_targets.is_empty();
    let results: Vec<Result<RollInExample, EditError>> = if use_tm {
        tm_targets
            .iter()
            .take(3)
            .map(|tm| make_tm_example(src, t, tm, cfg, rng, model))
            .collect()
    } else {
        vec![make_vanilla_example(src, t, cfg.k_max, rng)]
    };
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(ex) => out.push(ex),
            Err(e @ EditError::PlaceholderOverflow { .. }) => log::warn!("skipping example: {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
