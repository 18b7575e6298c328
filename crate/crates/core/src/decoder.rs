//! Iterative refinement: delete, insert placeholders, fill, repeat until the
//! state stops changing, revisits an earlier state, or hits the iteration cap.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, BOS_ID, EOS_ID, PLH_ID};
use crate::edit_calculus::{apply_delete, apply_placeholders, fill_tokens, EditError};
use crate::policy::{argmax, EditPolicy, PolicyError, PolicySession};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error("max_iter must be at least 1")]
    ZeroIterations,
    #[error("policy returned {got} {what}, expected {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("init mode {0:?} needs {1}")]
    MissingInit(InitMode, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Empty,
    Tm,
    RandomSent,
    ShuffleRef,
    Given,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Empty => "empty",
            InitMode::Tm => "tm",
            InitMode::RandomSent => "random_sent",
            InitMode::ShuffleRef => "shuffle_ref",
            InitMode::Given => "given",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Empty, Self::Tm, Self::RandomSent, Self::ShuffleRef, Self::Given]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_iter: usize,
    pub init_mode: InitMode,
    pub loop_detection: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_iter: 10,
            init_mode: InitMode::Tm,
            loop_detection: true,
        }
    }
}

/// Encoder input plus the current target, which always carries BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DecoderState {
    pub encoder_input: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl DecoderState {
    pub fn new(encoder_input: Vec<TokenId>, interior: &[TokenId]) -> Self {
        let mut target = Vec::with_capacity(interior.len() + 2);
        target.push(BOS_ID);
        target.extend_from_slice(interior);
        target.push(EOS_ID);
        Self { encoder_input, target }
    }

    pub fn interior(&self) -> &[TokenId] {
        &self.target[1..self.target.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub deletions: usize,
    pub placeholders: usize,
    pub filled: usize,
    /// Whether the deletion decision was requested at all.
    pub deletion_called: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    Fixpoint,
    Loop,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub iterations: usize,
    pub steps: Vec<StepRecord>,
    pub convergence: Convergence,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), DecodeError> {
    if expected == got {
        Ok(())
    } else {
        Err(DecodeError::Shape { what, expected, got })
    }
}

/// One delete / placeholder / fill round with argmax decisions.
pub fn refine_once(
    session: &mut dyn PolicySession,
    state: &DecoderState,
    is_first: bool,
) -> Result<(DecoderState, StepRecord), DecodeError> {
    let mut rec = StepRecord {
        deletions: 0,
        placeholders: 0,
        filled: 0,
        deletion_called: false,
    };
    let mut y: Vec<TokenId> = state.interior().to_vec();
    if !(is_first && y.is_empty()) {
        rec.deletion_called = true;
        let p = session.delete(&state.target)?;
        check_len("deletion scores", y.len(), p.len())?;
        let flags: Vec<bool> = p.iter().map(|&p| p > 0.5).collect();
        rec.deletions = flags.iter().filter(|&&f| f).count();
        y = apply_delete(&y, &flags)?;
    }
    let cur = DecoderState::new(state.encoder_input.clone(), &y);
    let dists = session.placeholders(&cur.target)?;
    check_len("placeholder distributions", y.len() + 1, dists.len())?;
    let counts: Vec<usize> = dists.iter().map(|d| argmax(d)).collect();
    rec.placeholders = counts.iter().sum();
    y = apply_placeholders(&y, &counts, &PLH_ID)?;
    if rec.placeholders > 0 {
        let cur = DecoderState::new(state.encoder_input.clone(), &y);
        let dists = session.tokens(&cur.target)?;
        check_len("token distributions", rec.placeholders, dists.len())?;
        let fills: Vec<TokenId> = dists.iter().map(|d| argmax(d) as TokenId).collect();
        rec.filled = fills.len();
        y = fill_tokens(&y, &fills, &PLH_ID)?;
    }
    Ok((DecoderState::new(state.encoder_input.clone(), &y), rec))
}

/// One sentence to decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeItem {
    pub id: u64,
    pub encoder_input: Vec<TokenId>,
    /// Initial target without BOS/EOS.
    pub init: Vec<TokenId>,
    /// Needed only by the oracle policy.
    pub reference: Option<Vec<TokenId>>,
}

/// Decode one item; returns the hypothesis (without BOS/EOS) and its trace.
pub fn decode(
    policy: &dyn EditPolicy,
    item: &DecodeItem,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace), DecodeError> {
    if cfg.max_iter == 0 {
        return Err(DecodeError::ZeroIterations);
    }
    let mut session = policy.session(&item.encoder_input, item.reference.as_deref())?;
    let mut state = DecoderState::new(item.encoder_input.clone(), &item.init);
    let mut seen: HashSet<Vec<TokenId>> = HashSet::from([state.target.clone()]);
    let mut visited: Vec<Vec<TokenId>> = vec![state.target.clone()];
    let mut steps = Vec::new();
    for it in 1..=cfg.max_iter {
        let (next, rec) = refine_once(session.as_mut(), &state, it == 1)?;
        steps.push(rec);
        if next.target == state.target {
            return Ok((
                next.interior().to_vec(),
                DecodeTrace {
                    iterations: it,
                    steps,
                    convergence: Convergence::Fixpoint,
                },
            ));
        }
        if cfg.loop_detection && seen.contains(&next.target) {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, t) in visited.iter().enumerate() {
                let s = session.sequence_score(t)?;
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            let t = &visited[best];
            return Ok((
                t[1..t.len() - 1].to_vec(),
                DecodeTrace {
                    iterations: it,
                    steps,
                    convergence: Convergence::Loop,
                },
            ));
        }
        seen.insert(next.target.clone());
        visited.push(next.target.clone());
        state = next;
    }
    Ok((
        state.interior().to_vec(),
        DecodeTrace {
            iterations: cfg.max_iter,
            steps,
            convergence: Convergence::MaxIter,
        },
    ))
}

/// Decode independent items in parallel; output order follows `items`.
pub fn batch_decode(
    policy: &dyn EditPolicy,
    items: &[DecodeItem],
    cfg: &DecodeConfig,
) -> Result<Vec<(Vec<TokenId>, DecodeTrace)>, DecodeError> {
    use rayon::prelude::*;
    items.par_iter().map(|it| decode(policy, it, cfg)).collect()
}

/// Build the initial target for `mode`.
pub fn make_init<R: Rng + ?Sized>(
    mode: InitMode,
    tm: Option<&[TokenId]>,
    reference: &[TokenId],
    pool: &[Vec<TokenId>],
    given: Option<&[TokenId]>,
    rng: &mut R,
) -> Result<Vec<TokenId>, DecodeError> {
    match mode {
        InitMode::Empty => Ok(Vec::new()),
        InitMode::Tm => tm.map(<[TokenId]>::to_vec).ok_or(DecodeError::MissingInit(mode, "a TM match")),
        InitMode::RandomSent => pool
            .choose(rng)
            .cloned()
            .ok_or(DecodeError::MissingInit(mode, "a non-empty sentence pool")),
        InitMode::ShuffleRef => {
            let mut v = reference.to_vec();
            v.shuffle(rng);
            Ok(v)
        }
        InitMode::Given => given.map(<[TokenId]>::to_vec).ok_or(DecodeError::MissingInit(mode, "an initial target")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HypothesisLine {
    pub id: u64,
    pub hyp: String,
    pub iterations: usize,
    pub convergence: Convergence,
}

/// One JSONL line of the hypothesis dump.
pub fn hypothesis_line(id: u64, hyp: &[String], trace: &DecodeTrace) -> String {
    serde_json::to_string(&HypothesisLine {
        id,
        hyp: hyp.join(" "),
        iterations: trace.iterations,
        convergence: trace.convergence,
    })
    .expect("hypothesis serializes")
}
