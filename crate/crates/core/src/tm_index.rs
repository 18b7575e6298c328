//! Fuzzy-match retrieval over a translation memory.
//!
//! Similarity is `1 - ED(x, x') / max(|x|, |x'|)` over whole tokens. The
//! n-gram index only prunes candidates with bounds that are implied by the
//! similarity window, so retrieval always equals an exhaustive scan.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{BinReader, BinWriter};
use crate::corpus::SentenceRecord;

pub const INDEX_MAGIC: &[u8; 8] = b"TMIX0001";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_GRAM_ORDER: usize = 3;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("similarity is undefined for two empty sequences")]
    BothEmpty,
    #[error("gram order must be at least 1")]
    ZeroGramOrder,
    #[error("invalid retrieval window [{0}, {1})")]
    BadWindow(f64, f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("bad index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Levenshtein distance with unit costs over whole tokens.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.len() < b.len() {
        return edit_distance(b, a);
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance if it is at most `max`; gives up as soon as a DP row exceeds it.
pub fn edit_distance_within<T: PartialEq>(a: &[T], b: &[T], max: usize) -> Option<usize> {
    if a.len() < b.len() {
        return edit_distance_within(b, a, max);
    }
    if a.len() - b.len() > max {
        return None;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        let mut row_min = cur[0];
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
            row_min = row_min.min(cur[j + 1]);
        }
        if row_min > max {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Some(prev[b.len()]).filter(|&d| d <= max)
}

/// `1 - ED(x, y) / max(|x|, |y|)`.
pub fn similarity<T: PartialEq>(x: &[T], y: &[T]) -> Result<f64, IndexError> {
    let m = x.len().max(y.len());
    if m == 0 {
        return Err(IndexError::BothEmpty);
    }
    Ok(1.0 - edit_distance(x, y) as f64 / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    High,
    Mid,
    None,
}

impl Bucket {
    pub fn name(self) -> &'static str {
        match self {
            Bucket::High => "high",
            Bucket::Mid => "mid",
            Bucket::None => "none",
        }
    }
}

/// `high` above 0.6, `mid` on the closed interval [0.4, 0.6].
pub fn bucketize(sim: f64) -> Bucket {
    if sim > 0.6 {
        Bucket::High
    } else if sim >= 0.4 {
        Bucket::Mid
    } else {
        Bucket::None
    }
}

/// One retrieved TM entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub segment_id: u64,
    pub sim: f64,
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
}

/// Retrieval request parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub k: usize,
    pub sim_min: f64,
    /// Exclusive; use a value above 1 to admit exact matches.
    pub sim_max: f64,
}

impl Window {
    pub fn new(k: usize, sim_min: f64, sim_max: f64) -> Result<Self, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if !(0.0..=1.0).contains(&sim_min) || !(sim_min < sim_max) || !sim_max.is_finite() {
            return Err(IndexError::BadWindow(sim_min, sim_max));
        }
        Ok(Self { k, sim_min, sim_max })
    }

    fn admits(&self, sim: f64) -> bool {
        sim >= self.sim_min && sim < self.sim_max
    }
}

impl Default for Window {
    fn default() -> Self {
        Self {
            k: 3,
            sim_min: 0.4,
            sim_max: 1.0,
        }
    }
}

type Gram = Vec<u32>;

/// Inverted index from source n-grams to segment positions.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramIndex {
    n: usize,
    /// Interned source tokens.
    dictionary: HashMap<String, u32>,
    postings: HashMap<Gram, Vec<u32>>,
    lengths: Vec<u32>,
    /// Interned source of every stored segment.
    encoded: Vec<Vec<u32>>,
    store: Vec<SentenceRecord>,
    /// Segment positions ordered by source length.
    by_length: Vec<u32>,
}

fn grams_of(ids: &[u32], n: usize) -> Vec<Gram> {
    if ids.len() < n {
        vec![ids.to_vec()]
    } else {
        ids.windows(n).map(<[u32]>::to_vec).collect()
    }
}

fn sort_matches(matches: &mut [Match]) {
    matches.sort_by(|a, b| {
        b.sim
            .partial_cmp(&a.sim)
            .expect("similarities are finite")
            .then(a.segment_id.cmp(&b.segment_id))
    });
}

impl NGramIndex {
    pub fn build(records: &[SentenceRecord], n: usize) -> Result<Self, IndexError> {
        if n == 0 {
            return Err(IndexError::ZeroGramOrder);
        }
        let mut dictionary: HashMap<String, u32> = HashMap::new();
        let mut postings: HashMap<Gram, Vec<u32>> = HashMap::new();
        let mut lengths = Vec::with_capacity(records.len());
        let mut encoded = Vec::with_capacity(records.len());
        for (pos, rec) in records.iter().enumerate() {
            let ids: Vec<u32> = rec
                .src
                .iter()
                .map(|t| {
                    let next = dictionary.len() as u32;
                    *dictionary.entry(t.clone()).or_insert(next)
                })
                .collect();
            lengths.push(ids.len() as u32);
            for g in grams_of(&ids, n) {
                let list = postings.entry(g).or_default();
                // positions are visited in ascending order
                if list.last() != Some(&(pos as u32)) {
                    list.push(pos as u32);
                }
            }
            encoded.push(ids);
        }
        let mut by_length: Vec<u32> = (0..records.len() as u32).collect();
        by_length.sort_by_key(|&p| (lengths[p as usize], p));
        Ok(Self {
            n,
            dictionary,
            postings,
            lengths,
            encoded,
            store: records.to_vec(),
            by_length,
        })
    }

    pub fn gram_order(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn records(&self) -> &[SentenceRecord] {
        &self.store
    }

    /// Sorted, duplicate-free posting list of a gram (test and debug access).
    pub fn posting(&self, gram: &[&str]) -> Option<&[u32]> {
        let ids: Option<Vec<u32>> = gram.iter().map(|t| self.dictionary.get(*t).copied()).collect();
        self.postings.get(&ids?).map(Vec::as_slice)
    }

    fn make_match(&self, pos: usize, sim: f64) -> Match {
        let rec = &self.store[pos];
        Match {
            segment_id: rec.id,
            sim,
            src_tokens: rec.src.clone(),
            tgt_tokens: rec.tgt.clone(),
        }
    }

    /// Reference implementation: score every stored segment.
    pub fn exhaustive(
        &self,
        query: &[String],
        window: Window,
        exclude_id: Option<u64>,
    ) -> Vec<Match> {
        let mut out: Vec<Match> = self
            .store
            .iter()
            .enumerate()
            .filter(|(_, r)| Some(r.id) != exclude_id)
            .filter_map(|(pos, r)| {
                let sim = similarity(query, &r.src).ok()?;
                window.admits(sim).then(|| self.make_match(pos, sim))
            })
            .collect();
        sort_matches(&mut out);
        out.truncate(window.k);
        out
    }

    /// Top-k matches within the window, identical to [`Self::exhaustive`].
    pub fn retrieve(
        &self,
        query: &[String],
        window: Window,
        exclude_id: Option<u64>,
    ) -> Vec<Match> {
        let qlen = query.len();
        if qlen == 0 || window.sim_min <= 0.0 {
            return self.exhaustive(query, window, exclude_id);
        }
        let s = window.sim_min;
        // |y| in [s |x|, |x| / s], widened by a hair against rounding.
        let lo = ((s * qlen as f64) - 1e-9).ceil().max(0.0) as u32;
        let hi = ((qlen as f64 / s) + 1e-9).floor() as u32;
        let start = self.by_length.partition_point(|&p| self.lengths[p as usize] < lo);
        let end = self.by_length.partition_point(|&p| self.lengths[p as usize] <= hi);

        // Occurrence-weighted shared-gram counts: an upper bound on the
        // multiset intersection of query and candidate grams. Grams holding a
        // token unknown to the store cannot be shared.
        let known: Vec<Option<u32>> = query.iter().map(|t| self.dictionary.get(t).copied()).collect();
        let windows: Vec<&[Option<u32>]> = if qlen >= self.n {
            known.windows(self.n).collect()
        } else {
            vec![&known[..]]
        };
        let q_grams = windows.len();
        let mut counts: HashMap<Gram, u32> = HashMap::new();
        for w in windows {
            if let Some(g) = w.iter().copied().collect::<Option<Gram>>() {
                *counts.entry(g).or_insert(0) += 1;
            }
        }
        let mut shared: HashMap<u32, u32> = HashMap::new();
        for (g, c) in counts {
            if let Some(list) = self.postings.get(&g) {
                for &p in list {
                    *shared.entry(p).or_insert(0) += c;
                }
            }
        }

        // Sequence-level upper bound on the similarity of each candidate:
        // ED >= ||x| - |y|| and, when both sides have full grams, ED >=
        // ceil((grams - shared) / n) since one edit touches at most n grams.
        let mut cands: Vec<(f64, u32)> = Vec::with_capacity(end - start);
        for &p in &self.by_length[start..end] {
            let pos = p as usize;
            if Some(self.store[pos].id) == exclude_id {
                continue;
            }
            let clen = self.lengths[pos] as usize;
            let longest = qlen.max(clen);
            let mut ed_lb = qlen.abs_diff(clen);
            if qlen >= self.n && clen >= self.n {
                let missing = q_grams.saturating_sub(shared.get(&p).copied().unwrap_or(0) as usize);
                ed_lb = ed_lb.max(missing.div_ceil(self.n));
            }
            let ub = 1.0 - ed_lb as f64 / longest as f64;
            if ub + 1e-9 >= s {
                cands.push((ub, p));
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));

        let q_ids = self.encode_query(query);
        let mut out: Vec<Match> = Vec::new();
        // Admitted (sim, segment id) pairs, best first, at most k.
        let mut best: Vec<(f64, u64)> = Vec::with_capacity(window.k + 1);
        for (ub, p) in cands {
            if best.len() == window.k && ub + 1e-9 < best[window.k - 1].0 {
                break;
            }
            let pos = p as usize;
            let cand = &self.encoded[pos];
            let longest = qlen.max(cand.len());
            let floor = match best.len() == window.k {
                true => s.max(best[window.k - 1].0),
                false => s,
            };
            let max_ed = ((1.0 - floor) * longest as f64 + 1e-9).floor() as usize;
            let Some(ed) = edit_distance_within(&q_ids, cand, max_ed) else {
                continue;
            };
            let sim = 1.0 - ed as f64 / longest as f64;
            if !window.admits(sim) {
                continue;
            }
            let id = self.store[pos].id;
            let rank = best.partition_point(|&(bs, bid)| bs > sim || (bs == sim && bid < id));
            if rank < window.k {
                best.insert(rank, (sim, id));
                best.truncate(window.k);
                out.push(self.make_match(pos, sim));
            }
        }
        sort_matches(&mut out);
        out.truncate(window.k);
        out
    }

    /// Intern a query; tokens unseen by the store get fresh ids past the dictionary.
    fn encode_query(&self, query: &[String]) -> Vec<u32> {
        let mut fresh: HashMap<&str, u32> = HashMap::new();
        query
            .iter()
            .map(|t| match self.dictionary.get(t) {
                Some(&id) => id,
                None => {
                    let next = self.dictionary.len() as u32 + fresh.len() as u32;
                    *fresh.entry(t.as_str()).or_insert(next)
                }
            })
            .collect()
    }

    /// Retrieve for every query record, excluding each record's own id.
    pub fn retrieve_all(
        &self,
        queries: &[SentenceRecord],
        window: Window,
        exclude_self: bool,
    ) -> Vec<Vec<Match>> {
        use rayon::prelude::*;
        queries
            .par_iter()
            .map(|q| self.retrieve(&q.src, window, exclude_self.then_some(q.id)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        self.write_to(&mut w)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> io::Result<()> {
        w.bytes(INDEX_MAGIC)?;
        w.u32(INDEX_VERSION)?;
        w.u32(self.n as u32)?;
        w.u32s(&self.lengths)?;
        let mut dict: Vec<(&String, &u32)> = self.dictionary.iter().collect();
        dict.sort_by_key(|(_, &id)| id);
        w.len(dict.len())?;
        for (tok, _) in dict {
            w.str(tok)?;
        }
        let mut grams: Vec<(&Gram, &Vec<u32>)> = self.postings.iter().collect();
        grams.sort();
        w.len(grams.len())?;
        for (g, list) in grams {
            w.u32s(g)?;
            w.u32s(list)?;
        }
        w.len(self.store.len())?;
        for rec in &self.store {
            w.u64(rec.id)?;
            w.str(&rec.domain)?;
            w.str(&rec.src.join(" "))?;
            w.str(&rec.tgt.join(" "))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        Self::read_from(&mut r)
    }

    pub fn read_from<R: io::Read>(r: &mut BinReader<R>) -> Result<Self, IndexError> {
        let magic: [u8; 8] = r.exact()?;
        if &magic != INDEX_MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(IndexError::Format(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(IndexError::ZeroGramOrder);
        }
        let lengths = r.u32s()?;
        let dict_len = r.len(1 << 31)?;
        let mut dictionary = HashMap::with_capacity(dict_len);
        for id in 0..dict_len {
            dictionary.insert(r.str()?, id as u32);
        }
        let n_grams = r.len(1 << 31)?;
        let mut postings = HashMap::with_capacity(n_grams);
        for _ in 0..n_grams {
            let g = r.u32s()?;
            let list = r.u32s()?;
            if list.windows(2).any(|w| w[0] >= w[1]) || list.iter().any(|&p| p as usize >= lengths.len()) {
                return Err(IndexError::Format("posting list not sorted or out of range".into()));
            }
            postings.insert(g, list);
        }
        let n_store = r.len(1 << 31)?;
        if n_store != lengths.len() {
            return Err(IndexError::Format("store and length table disagree".into()));
        }
        let mut store = Vec::with_capacity(n_store);
        for _ in 0..n_store {
            let id = r.u64()?;
            let domain = r.str()?;
            let src: Vec<String> = r.str()?.split(' ').filter(|s| !s.is_empty()).map(str::to_string).collect();
            let tgt: Vec<String> = r.str()?.split(' ').filter(|s| !s.is_empty()).map(str::to_string).collect();
            store.push(SentenceRecord { id, domain, src, tgt });
        }
        let mut encoded = Vec::with_capacity(store.len());
        for (rec, &len) in store.iter().zip(&lengths) {
            let ids: Option<Vec<u32>> = rec.src.iter().map(|t| dictionary.get(t).copied()).collect();
            match ids {
                Some(ids) if ids.len() == len as usize => encoded.push(ids),
                _ => return Err(IndexError::Format("stored source disagrees with dictionary".into())),
            }
        }
        let mut by_length: Vec<u32> = (0..store.len() as u32).collect();
        by_length.sort_by_key(|&p| (lengths[p as usize], p));
        Ok(Self {
            n,
            dictionary,
            postings,
            lengths,
            encoded,
            store,
            by_length,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpMatch {
    segment_id: u64,
    sim: f64,
    src: String,
    tgt: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpLine {
    query_id: u64,
    matches: Vec<DumpMatch>,
}

/// One JSONL line of the match dump.
pub fn match_dump_line(query_id: u64, matches: &[Match]) -> String {
    let line = DumpLine {
        query_id,
        matches: matches
            .iter()
            .map(|m| DumpMatch {
                segment_id: m.segment_id,
                sim: m.sim,
                src: m.src_tokens.join(" "),
                tgt: m.tgt_tokens.join(" "),
            })
            .collect(),
    };
    serde_json::to_string(&line).expect("match line serializes")
}

/// Parse a match dump back into `(query_id, matches)` pairs.
pub fn parse_match_dump(text: &str) -> Result<Vec<(u64, Vec<Match>)>, IndexError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let d: DumpLine = serde_json::from_str(l)
                .map_err(|e| IndexError::Format(format!("line {}: {e}", i + 1)))?;
            let ms = d
                .matches
                .into_iter()
                .map(|m| Match {
                    segment_id: m.segment_id,
                    sim: m.sim,
                    src_tokens: m.src.split_whitespace().map(str::to_string).collect(),
                    tgt_tokens: m.tgt.split_whitespace().map(str::to_string).collect(),
                })
                .collect();
            Ok((d.query_id, ms))
        })
        .collect()
}
