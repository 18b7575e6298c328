//! Parallel corpus ingestion, vocabulary, dataset splits and synthetic data.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, streams};
use crate::tm_index::{bucketize, Bucket, Match};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const PLH: &str = "<plh>";
pub const SEP: &str = "<sep>";

/// Reserved tokens in id order.
pub const SPECIAL_TOKENS: [&str; 6] = [PAD, BOS, EOS, UNK, PLH, SEP];

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;
pub const PLH_ID: TokenId = 4;
pub const SEP_ID: TokenId = 5;
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub fn is_special(token: &str) -> bool {
    SPECIAL_TOKENS.contains(&token)
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: validation error: {message}")]
    Validation { line: usize, message: String },
    #[error("bucket {bucket}: requested {requested} records but only {available} available")]
    BucketTooSmall {
        bucket: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("records and matches differ in length ({records} vs {matches})")]
    MatchCount { records: usize, matches: usize },
    #[error("vocabulary size {0} leaves no room beyond the reserved tokens")]
    VocabTooSmall(usize),
    #[error("grammar error: {0}")]
    Grammar(String),
}

/// A tokenized parallel sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: u64,
    pub domain: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl SentenceRecord {
    pub fn new(id: u64, domain: &str, src: &str, tgt: &str) -> Self {
        Self {
            id,
            domain: domain.to_string(),
            src: WhitespaceTokenizer.tokenize(src),
            tgt: WhitespaceTokenizer.tokenize(tgt),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.src.is_empty() {
            return Err("empty src".into());
        }
        if self.tgt.is_empty() {
            return Err("empty tgt".into());
        }
        if let Some(t) = self.src.iter().chain(&self.tgt).find(|t| is_special(t)) {
            return Err(format!("reserved token {t} in text"));
        }
        Ok(())
    }
}

/// Splits raw text into tokens.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
    fn detokenize(&self, tokens: &[String]) -> String;
}

/// Pre-tokenized input: tokens are separated by whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.join(" ")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    #[serde(default)]
    domain: String,
    src: String,
    tgt: String,
}

/// Parse JSONL corpus text. Ids default to the record's position in the file.
pub fn parse_corpus(text: &str) -> Result<Vec<SentenceRecord>, CorpusError> {
    parse_lines(text.lines().map(|l| Ok::<_, std::io::Error>(l.to_string())), "<memory>")
}

fn parse_lines<I>(lines: I, path: &str) -> Result<Vec<SentenceRecord>, CorpusError>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    let tok = WhitespaceTokenizer;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let rec = SentenceRecord {
            id: raw.id.unwrap_or(out.len() as u64),
            domain: raw.domain,
            src: tok.tokenize(&raw.src),
            tgt: tok.tokenize(&raw.tgt),
        };
        rec.validate()
            .map_err(|message| CorpusError::Validation { line: lineno, message })?;
        if !seen.insert(rec.id) {
            return Err(CorpusError::Validation {
                line: lineno,
                message: format!("duplicate id {}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Load a JSONL corpus from disk.
pub fn load_corpus(path: &Path) -> Result<Vec<SentenceRecord>, CorpusError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: name.clone(),
        source,
    })?;
    parse_lines(BufReader::new(file).lines(), &name)
}

pub fn record_to_json(rec: &SentenceRecord) -> String {
    let raw = RawRecord {
        id: Some(rec.id),
        domain: rec.domain.clone(),
        src: rec.src.join(" "),
        tgt: rec.tgt.join(" "),
    };
    serde_json::to_string(&raw).expect("record serializes")
}

pub fn write_corpus(path: &Path, records: &[SentenceRecord]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for rec in records {
        writeln!(w, "{}", record_to_json(rec)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Drop exact (src, tgt) duplicates, keeping first occurrences in order.
pub fn deduplicate(records: &[SentenceRecord]) -> Vec<SentenceRecord> {
    let mut seen: HashSet<(&[String], &[String])> = HashSet::with_capacity(records.len());
    records
        .iter()
        .filter(|r| seen.insert((r.src.as_slice(), r.tgt.as_slice())))
        .cloned()
        .collect()
}

/// Shared source/target vocabulary with six reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Build from an explicit token list; reserved tokens are prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            let t = t.into();
            if !is_special(&t) && !all.contains(&t) {
                all.push(t);
            }
        }
        Self::from_full_list(all)
    }

    /// Rebuild from a complete id-ordered list (as stored in checkpoints).
    pub fn from_full_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Ids out of range decode to the unknown token.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let tokens: Vec<String> = serde_json::from_str(text)?;
        let mut v = Self {
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }
}

/// Most frequent tokens (source and target sides together) up to `max_size`
/// entries including the reserved ones; ties keep first-occurrence order.
pub fn build_vocabulary(
    records: &[SentenceRecord],
    max_size: usize,
) -> Result<Vocabulary, CorpusError> {
    if max_size <= NUM_SPECIAL {
        return Err(CorpusError::VocabTooSmall(max_size));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0usize;
    for rec in records {
        for tok in rec.src.iter().chain(&rec.tgt) {
            let e = counts.entry(tok.as_str()).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> =
        counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(max_size - NUM_SPECIAL);
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _, _)| t)))
}

/// Disjoint record-id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub test_high: Vec<u64>,
    pub test_mid: Vec<u64>,
    pub heldout: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub high: usize,
    pub mid: usize,
    pub heldout: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            high: 200,
            mid: 200,
            heldout: 200,
        }
    }
}

/// Best similarity among a record's matches, if any.
pub fn best_sim(matches: &[Match]) -> Option<f64> {
    matches.iter().map(|m| m.sim).fold(None, |acc, s| match acc {
        Some(a) if a >= s => Some(a),
        _ => Some(s),
    })
}

fn bucket_of(matches: &[Match]) -> Bucket {
    best_sim(matches).map(bucketize).unwrap_or(Bucket::None)
}

/// Sample the test buckets and the held-out set; everything else is train.
///
/// `matches[i]` must hold the matches of `records[i]` retrieved against the
/// full corpus with the record itself excluded.
pub fn split_dataset(
    records: &[SentenceRecord],
    matches: &[Vec<Match>],
    sizes: SplitSizes,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    if records.len() != matches.len() {
        return Err(CorpusError::MatchCount {
            records: records.len(),
            matches: matches.len(),
        });
    }
    let mut pools: [Vec<u64>; 3] = Default::default();
    for (rec, ms) in records.iter().zip(matches) {
        let slot = match bucket_of(ms) {
            Bucket::High => 0,
            Bucket::Mid => 1,
            Bucket::None => 2,
        };
        pools[slot].push(rec.id);
    }
    let mut rng = rng::stream(seed, streams::SPLIT);
    let wanted = [
        ("high", sizes.high),
        ("mid", sizes.mid),
        ("heldout", sizes.heldout),
    ];
    let mut picked: Vec<Vec<u64>> = Vec::with_capacity(3);
    for ((name, n), pool) in wanted.into_iter().zip(pools.iter_mut()) {
        if n > pool.len() {
            return Err(CorpusError::BucketTooSmall {
                bucket: name,
                requested: n,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        let mut chosen = pool[..n].to_vec();
        chosen.sort_unstable();
        picked.push(chosen);
    }
    let taken: HashSet<u64> = picked.iter().flatten().copied().collect();
    let train = records
        .iter()
        .map(|r| r.id)
        .filter(|id| !taken.contains(id))
        .collect();
    let heldout = picked.pop().unwrap_or_default();
    let test_mid = picked.pop().unwrap_or_default();
    let test_high = picked.pop().unwrap_or_default();
    Ok(DatasetSplit {
        train,
        test_high,
        test_mid,
        heldout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub count: usize,
    pub ratio_high: f64,
    pub ratio_mid: f64,
}

/// Per-domain TM coverage plus a `"total"` row.
pub fn corpus_stats(
    records: &[SentenceRecord],
    matches: &[Vec<Match>],
) -> Result<BTreeMap<String, DomainStats>, CorpusError> {
    if records.len() != matches.len() {
        return Err(CorpusError::MatchCount {
            records: records.len(),
            matches: matches.len(),
        });
    }
    let mut acc: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (rec, ms) in records.iter().zip(matches) {
        let b = bucket_of(ms);
        for key in [rec.domain.as_str(), "total"] {
            let e = acc.entry(key.to_string()).or_default();
            e.0 += 1;
            e.1 += usize::from(b == Bucket::High);
            e.2 += usize::from(b == Bucket::Mid);
        }
    }
    acc.entry("total".to_string()).or_default();
    Ok(acc
        .into_iter()
        .map(|(k, (n, h, m))| {
            let ratio = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
            (
                k,
                DomainStats {
                    count: n,
                    ratio_high: ratio(h),
                    ratio_mid: ratio(m),
                },
            )
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

/// A slot-template grammar.
///
/// Template patterns are whitespace-separated; `$name` is a slot filled from
/// lexicon `name`. On the target side `$name@k` refers to the k-th (1-based)
/// `$name` slot of the source; a bare `$name` on the target side refers to
/// the slot with the same occurrence rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    #[serde(default = "default_domain")]
    pub domain: String,
    pub lexicons: BTreeMap<String, Vec<(String, String)>>,
    pub templates: Vec<Template>,
}

fn default_domain() -> String {
    "synth".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub src: String,
    pub tgt: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Word(String),
    Slot { lexicon: String, rank: usize },
}

#[derive(Debug, Clone)]
struct CompiledTemplate {
    src: Vec<Piece>,
    tgt: Vec<Piece>,
}

fn parse_pattern(pattern: &str, target: bool) -> Result<Vec<Piece>, String> {
    let mut ranks: HashMap<String, usize> = HashMap::new();
    pattern
        .split_whitespace()
        .map(|tok| {
            if let Some(slot) = tok.strip_prefix('$') {
                let (name, explicit) = match slot.split_once('@') {
                    Some((n, k)) if target => {
                        let k: usize = k.parse().map_err(|_| format!("bad slot rank in {tok}"))?;
                        if k == 0 {
                            return Err(format!("slot ranks are 1-based: {tok}"));
                        }
                        (n, Some(k - 1))
                    }
                    Some(_) => return Err(format!("explicit slot rank on source side: {tok}")),
                    None => (slot, None),
                };
                let counter = ranks.entry(name.to_string()).or_insert(0);
                let rank = explicit.unwrap_or(*counter);
                *counter += 1;
                Ok(Piece::Slot {
                    lexicon: name.to_string(),
                    rank,
                })
            } else if is_special(tok) {
                Err(format!("reserved token {tok} in template"))
            } else {
                Ok(Piece::Word(tok.to_string()))
            }
        })
        .collect()
}

impl Grammar {
    fn compile(&self) -> Result<Vec<CompiledTemplate>, CorpusError> {
        if self.templates.is_empty() {
            return Err(CorpusError::Grammar("grammar defines no templates".into()));
        }
        self.templates
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let err = |m: String| CorpusError::Grammar(format!("template {i}: {m}"));
                let src = parse_pattern(&t.src, false).map_err(err)?;
                let tgt = parse_pattern(&t.tgt, true).map_err(err)?;
                if src.is_empty() || tgt.is_empty() {
                    return Err(err("empty pattern".into()));
                }
                if !(t.weight > 0.0) {
                    return Err(err("weight must be positive".into()));
                }
                let mut src_slots: HashMap<&str, usize> = HashMap::new();
                for p in &src {
                    if let Piece::Slot { lexicon, .. } = p {
                        match self.lexicons.get(lexicon) {
                            Some(l) if !l.is_empty() => {}
                            _ => return Err(err(format!("unknown or empty lexicon {lexicon}"))),
                        }
                        *src_slots.entry(lexicon).or_insert(0) += 1;
                    }
                }
                for p in &tgt {
                    if let Piece::Slot { lexicon, rank } = p {
                        if *rank >= src_slots.get(lexicon.as_str()).copied().unwrap_or(0) {
                            return Err(err(format!("target slot ${lexicon}@{} has no source slot", rank + 1)));
                        }
                    }
                }
                Ok(CompiledTemplate { src, tgt })
            })
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let g: Grammar =
            serde_json::from_str(text).map_err(|e| CorpusError::Grammar(e.to_string()))?;
        g.compile()?;
        Ok(g)
    }

    /// The built-in desk-scale grammar: frequent low-slot templates with
    /// template-specific target phrasing that give close matches, sparse
    /// open-slot templates with word-by-word translations that mostly give
    /// acceptable matches, and free word sequences that rarely match anything.
    pub fn builtin() -> Self {
        builtin_grammar()
    }
}

/// Generate `n` records; same `(grammar, n, seed)` gives identical output.
pub fn generate_synthetic(
    grammar: &Grammar,
    n: usize,
    seed: u64,
) -> Result<Vec<SentenceRecord>, CorpusError> {
    let compiled = grammar.compile()?;
    let total: f64 = grammar.templates.iter().map(|t| t.weight).sum();
    let mut rng = rng::stream(seed, streams::SYNTH);
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let mut r = rng.gen::<f64>() * total;
        let mut which = compiled.len() - 1;
        for (i, t) in grammar.templates.iter().enumerate() {
            if r < t.weight {
                which = i;
                break;
            }
            r -= t.weight;
        }
        let tpl = &compiled[which];
        let mut fills: HashMap<(String, usize), usize> = HashMap::new();
        let mut src = Vec::with_capacity(tpl.src.len());
        for p in &tpl.src {
            match p {
                Piece::Word(w) => src.push(w.clone()),
                Piece::Slot { lexicon, rank } => {
                    let lex = &grammar.lexicons[lexicon];
                    let k = rng.gen_range(0..lex.len());
                    fills.insert((lexicon.clone(), *rank), k);
                    src.push(lex[k].0.clone());
                }
            }
        }
        let tgt = tpl
            .tgt
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.clone(),
                Piece::Slot { lexicon, rank } => {
                    let k = fills[&(lexicon.clone(), *rank)];
                    grammar.lexicons[lexicon][k].1.clone()
                }
            })
            .collect();
        out.push(SentenceRecord {
            id: id as u64,
            domain: grammar.domain.clone(),
            src,
            tgt,
        });
    }
    Ok(out)
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "sa", "no", "vi", "pe", "du", "ra", "zo", "fe", "li", "bo", "gu",
];

fn pseudo_word(i: usize, salt: usize) -> String {
    let a = SYLLABLES[i % 16];
    let b = SYLLABLES[(i / 16 + salt) % 16];
    let c = SYLLABLES[(i * 7 + salt * 3) % 16];
    format!("{a}{b}{c}")
}

fn builtin_grammar() -> Grammar {
    use rand::SeedableRng;
    // Fixed construction stream; the grammar itself never depends on a user seed.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x7e3a_11c0);

    const FIXED: usize = 60;
    const FREQUENT: usize = 300;
    let src_words: Vec<String> = (0..FIXED).map(|i| pseudo_word(i, 0)).collect();
    let tgt_words: Vec<String> = (0..FIXED).map(|i| format!("{}e", pseudo_word(i, 5).to_uppercase())).collect();
    let particles: Vec<String> = ["DE", "LA", "EN", "UN", "AU", "QUE"].iter().map(|s| s.to_string()).collect();

    let mut lexicons = BTreeMap::new();
    for (l, name) in ["obj", "act", "loc", "qual"].iter().enumerate() {
        let entries = (0..14)
            .map(|j| {
                let s = format!("{}{}", name, pseudo_word(j * 3 + l, 2));
                let t = format!("{}{}", name.to_uppercase(), pseudo_word(j * 5 + l, 7).to_uppercase());
                (s, t)
            })
            .collect();
        lexicons.insert(name.to_string(), entries);
    }
    // Open slots draw from the fixed word pool itself.
    lexicons.insert(
        "open".to_string(),
        src_words.iter().cloned().zip(tgt_words.iter().cloned()).collect(),
    );
    let slot_names = ["obj", "act", "loc", "qual"];

    // Map a source pattern to its target pattern: words translate one to one,
    // with an occasional local swap and a target-only particle.
    let translate = |src: &[String], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
        let mut counters: HashMap<String, usize> = HashMap::new();
        let mut tgt: Vec<String> = src
            .iter()
            .map(|tok| {
                if let Some(name) = tok.strip_prefix('$') {
                    let c = counters.entry(name.to_string()).or_insert(0);
                    *c += 1;
                    format!("${name}@{c}")
                } else {
                    let i = src_words.iter().position(|w| w == tok).expect("pool word");
                    tgt_words[i].clone()
                }
            })
            .collect();
        if tgt.len() > 3 && rng.gen_bool(0.5) {
            let i = rng.gen_range(0..tgt.len() - 1);
            tgt.swap(i, i + 1);
        }
        if rng.gen_bool(0.5) {
            let i = rng.gen_range(1..tgt.len());
            tgt.insert(i, particles[rng.gen_range(0..particles.len())].clone());
        }
        tgt
    };

    // Template-specific phrasing: fixed words map to arbitrary target words,
    // so only close matches reveal them.
    let idiom = |src: &[String], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
        let mut counters: HashMap<String, usize> = HashMap::new();
        let mut tgt: Vec<String> = src
            .iter()
            .map(|tok| match tok.strip_prefix('$') {
                Some(name) => {
                    let c = counters.entry(name.to_string()).or_insert(0);
                    *c += 1;
                    format!("${name}@{c}")
                }
                None => tgt_words[rng.gen_range(0..FIXED)].clone(),
            })
            .collect();
        if rng.gen_bool(0.5) {
            let i = rng.gen_range(1..tgt.len());
            tgt.insert(i, particles[rng.gen_range(0..particles.len())].clone());
        }
        tgt
    };

    let mut templates = Vec::new();
    // Frequent templates: three closed slots.
    for _ in 0..FREQUENT {
        let len = rng.gen_range(8..=10);
        let mut src: Vec<String> = (0..len).map(|_| src_words[rng.gen_range(0..FIXED)].clone()).collect();
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(&mut rng);
        for &p in positions.iter().take(3) {
            src[p] = format!("${}", slot_names[rng.gen_range(0..slot_names.len())]);
        }
        let tgt = idiom(&src, &mut rng);
        templates.push(Template {
            src: src.join(" "),
            tgt: tgt.join(" "),
            weight: 0.70 / FREQUENT as f64,
        });
    }
    // Sparse templates: five open slots out of nine tokens.
    for _ in 0..40 {
        let len = 9;
        let mut src: Vec<String> = (0..len).map(|_| src_words[rng.gen_range(0..FIXED)].clone()).collect();
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(&mut rng);
        for &p in positions.iter().take(5) {
            src[p] = "$open".to_string();
        }
        let tgt = translate(&src, &mut rng);
        templates.push(Template {
            src: src.join(" "),
            tgt: tgt.join(" "),
            weight: 0.16 / 40.0,
        });
    }
    // Free sequences: every position open.
    for len in 6..=9 {
        let src = vec!["$open".to_string(); len];
        let tgt: Vec<String> = (1..=len).map(|k| format!("$open@{k}")).collect();
        templates.push(Template {
            src: src.join(" "),
            tgt: tgt.join(" "),
            weight: 0.14 / 4.0,
        });
    }
    Grammar {
        domain: "synth".to_string(),
        lexicons,
        templates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, src: &str, tgt: &str) -> SentenceRecord {
        SentenceRecord::new(id, "d", src, tgt)
    }

    #[test]
    fn parses_single_line() {
        let recs = parse_corpus(r#"{"domain":"synth","src":"a b","tgt":"c d"}"#).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id, 0);
        assert_eq!(recs[0].src, vec!["a", "b"]);
        assert_eq!(recs[0].tgt, vec!["c", "d"]);
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse_corpus("").unwrap().is_empty());
    }

    #[test]
    fn empty_src_is_validation_error_with_line() {
        let text = "{\"domain\":\"x\",\"src\":\"a\",\"tgt\":\"b\"}\n{\"domain\":\"x\",\"src\":\"\",\"tgt\":\"b\"}";
        match parse_corpus(text) {
            Err(CorpusError::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        match parse_corpus("{\"src\":\"a\",\"tgt\":\"b\"}\nnot json") {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn special_tokens_rejected() {
        assert!(matches!(
            parse_corpus(r#"{"src":"a <plh>","tgt":"b"}"#),
            Err(CorpusError::Validation { .. })
        ));
    }

    #[test]
    fn dedup_keeps_first_and_distinct_targets() {
        let r = vec![rec(0, "a", "b"), rec(1, "a", "b"), rec(2, "a", "c")];
        let d = deduplicate(&r);
        assert_eq!(d.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(deduplicate(&d), d);
    }

    #[test]
    fn vocabulary_reserves_ids_and_breaks_ties_by_first_occurrence() {
        let r = vec![rec(0, "x y", "y z"), rec(1, "w", "z")];
        let v = build_vocabulary(&r, 100).unwrap();
        assert_eq!(v.token(PLH_ID), Some(PLH));
        assert_eq!(v.token(SEP_ID), Some(SEP));
        // y and z occur twice; y first.
        assert_eq!(v.tokens()[6..], ["y", "z", "x", "w"]);
        let small = build_vocabulary(&r, 8).unwrap();
        assert_eq!(small.len(), 8);
        assert_eq!(small.id("w"), UNK_ID);
        assert!(build_vocabulary(&r, 6).is_err());
    }

    #[test]
    fn vocabulary_json_roundtrip() {
        let v = Vocabulary::from_tokens(["a", "b"]);
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back.id("b"), v.id("b"));
        assert_eq!(back.decode(&back.encode(&["a", "b"])), vec!["a", "b"]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let g = Grammar::builtin();
        let a = generate_synthetic(&g, 50, 3).unwrap();
        let b = generate_synthetic(&g, 50, 3).unwrap();
        let c = generate_synthetic(&g, 50, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|r| r.validate().is_ok()));
    }

    #[test]
    fn grammar_slot_ranks_and_reordering() {
        let g = Grammar::from_json(
            r#"{"lexicons":{"n":[["cat","chat"],["dog","chien"]]},
                "templates":[{"src":"$n and $n","tgt":"$n@2 et $n@1"}]}"#,
        )
        .unwrap();
        for r in generate_synthetic(&g, 20, 1).unwrap() {
            let tr = |w: &str| if w == "cat" { "chat" } else { "chien" };
            assert_eq!(r.tgt, vec![tr(&r.src[2]), "et", tr(&r.src[0])]);
        }
        assert!(Grammar::from_json(r#"{"lexicons":{},"templates":[]}"#).is_err());
        assert!(Grammar::from_json(
            r#"{"lexicons":{"n":[["a","b"]]},"templates":[{"src":"$n","tgt":"$n@2"}]}"#
        )
        .is_err());
    }
}
