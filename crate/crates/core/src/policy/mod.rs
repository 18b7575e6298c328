//! Edit policies: the three LevT decisions (delete, placeholder count, token
//! fill) behind one interface, with oracle, copy and neural implementations.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod neural;
pub mod tensor;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, PLH_ID, UNK_ID};
use crate::edit_calculus::{aligned_insertion_labels, oracle_delete_labels, EditError};

pub use neural::NeuralPolicy;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("encoder input is empty")]
    EmptyInput,
    #[error("target must start with BOS and end with EOS")]
    BadTarget,
    #[error("the oracle policy needs a reference")]
    MissingReference,
    #[error("gradient check needs at least one parameter")]
    NoParameters,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// All three decision distributions for one decoder state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    /// Probability of deleting each interior token.
    pub delete_scores: Vec<f64>,
    /// Per gap, a distribution over `0..=k_max` placeholders.
    pub plh_scores: Vec<Vec<f64>>,
    /// Per placeholder, a distribution over the vocabulary.
    pub tok_scores: Vec<Vec<f64>>,
}

/// Decisions bound to one encoder input. Targets include BOS and EOS.
pub trait PolicySession {
    fn delete(&mut self, target: &[TokenId]) -> Result<Vec<f64>, PolicyError>;
    fn placeholders(&mut self, target: &[TokenId]) -> Result<Vec<Vec<f64>>, PolicyError>;
    fn tokens(&mut self, target: &[TokenId]) -> Result<Vec<Vec<f64>>, PolicyError>;
    /// Mean token log-probability of the interior of `target`.
    fn sequence_score(&mut self, target: &[TokenId]) -> Result<f64, PolicyError>;

    fn forward(&mut self, target: &[TokenId]) -> Result<PolicyOutput, PolicyError> {
        Ok(PolicyOutput {
            delete_scores: self.delete(target)?,
            plh_scores: self.placeholders(target)?,
            tok_scores: self.tokens(target)?,
        })
    }
}

pub trait EditPolicy: Sync {
    fn name(&self) -> &str;
    fn k_max(&self) -> usize;
    fn session<'a>(
        &'a self,
        encoder_input: &[TokenId],
        reference: Option<&[TokenId]>,
    ) -> Result<Box<dyn PolicySession + 'a>, PolicyError>;
}

/// Index of the first maximum.
pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate() {
        if v > dist[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn interior(target: &[TokenId]) -> Result<&[TokenId], PolicyError> {
    use crate::corpus::{BOS_ID, EOS_ID};
    match target {
        [BOS_ID, inner @ .., EOS_ID] => Ok(inner),
        _ => Err(PolicyError::BadTarget),
    }
}

fn one_hot(n: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[at] = 1.0;
    v
}

/// Emits the oracle labels of the edit calculus against a fixed reference.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    vocab: usize,
    k_max: usize,
}

impl OraclePolicy {
    pub fn new(vocab: usize, k_max: usize) -> Self {
        Self { vocab, k_max }
    }
}

struct OracleSession<'a> {
    policy: &'a OraclePolicy,
    reference: Vec<TokenId>,
}

impl PolicySession for OracleSession<'_> {
    fn delete(&mut self, target: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        let y = interior(target)?;
        Ok(oracle_delete_labels(y, &self.reference)
            .into_iter()
            .map(|d| if d { 1.0 } else { 0.0 })
            .collect())
    }

    fn placeholders(&mut self, target: &[TokenId]) -> Result<Vec<Vec<f64>>, PolicyError> {
        let y = interior(target)?;
        let k = self.policy.k_max;
        Ok(aligned_insertion_labels(y, &self.reference)
            .counts
            .into_iter()
            .map(|c| one_hot(k + 1, c.min(k)))
            .collect())
    }

    fn tokens(&mut self, target: &[TokenId]) -> Result<Vec<Vec<f64>>, PolicyError> {
        let y = interior(target)?;
        let kept: Vec<TokenId> = y.iter().copied().filter(|&t| t != PLH_ID).collect();
        let labels = aligned_insertion_labels(&kept, &self.reference);
        let mut starts = Vec::with_capacity(labels.counts.len());
        let mut acc = 0;
        for &c in &labels.counts {
            starts.push(acc);
            acc += c;
        }
        let mut out = Vec::new();
        let (mut gap, mut used) = (0usize, 0usize);
        for &t in y {
            if t == PLH_ID {
                let tok = if used < labels.counts[gap] {
                    labels.fills[starts[gap] + used]
                } else {
                    UNK_ID
                };
                used += 1;
                if tok as usize >= self.policy.vocab {
                    return Err(PolicyError::TokenOutOfRange {
                        id: tok,
                        vocab: self.policy.vocab,
                    });
                }
                out.push(one_hot(self.policy.vocab, tok as usize));
            } else {
                gap += 1;
                used = 0;
            }
        }
        Ok(out)
    }

    fn sequence_score(&mut self, target: &[TokenId]) -> Result<f64, PolicyError> {
        Ok(if interior(target)? == self.reference.as_slice() {
            0.0
        } else {
            -1.0
        })
    }
}

impl EditPolicy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn k_max(&self) -> usize {
        self.k_max
    }

    fn session<'a>(
        &'a self,
        _encoder_input: &[TokenId],
        reference: Option<&[TokenId]>,
    ) -> Result<Box<dyn PolicySession + 'a>, PolicyError> {
        let reference = reference.ok_or(PolicyError::MissingReference)?.to_vec();
        Ok(Box::new(OracleSession { policy: self, reference }))
    }
}

/// Never deletes and never inserts: the decoded output is the initial target.
#[derive(Debug, Clone)]
pub struct CopyPolicy {
    vocab: usize,
    k_max: usize,
}

impl CopyPolicy {
    pub fn new(vocab: usize, k_max: usize) -> Self {
        Self { vocab, k_max }
    }
}

struct CopySession<'a>(&'a CopyPolicy);

impl PolicySession for CopySession<'_> {
    fn delete(&mut self, target: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        Ok(vec![0.0; interior(target)?.len()])
    }

    fn placeholders(&mut self, target: &[TokenId]) -> Result<Vec<Vec<f64>>, PolicyError> {
        Ok(vec![one_hot(self.0.k_max + 1, 0); interior(target)?.len() + 1])
    }

    fn tokens(&mut self, target: &[TokenId]) -> Result<Vec<Vec<f64>>, PolicyError> {
        let n = interior(target)?.iter().filter(|&&t| t == PLH_ID).count();
        Ok(vec![one_hot(self.0.vocab, UNK_ID as usize); n])
    }

    fn sequence_score(&mut self, target: &[TokenId]) -> Result<f64, PolicyError> {
        interior(target)?;
        Ok(0.0)
    }
}

impl EditPolicy for CopyPolicy {
    fn name(&self) -> &str {
        "copy"
    }

    fn k_max(&self) -> usize {
        self.k_max
    }

    fn session<'a>(
        &'a self,
        _encoder_input: &[TokenId],
        _reference: Option<&[TokenId]>,
    ) -> Result<Box<dyn PolicySession + 'a>, PolicyError> {
        Ok(Box::new(CopySession(self)))
    }
}

/// Cross-entropy of emitted distributions against edit targets: each task is
/// averaged over its positions and the averages are summed. Tasks without
/// positions contribute nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskTargets<'a> {
    pub init_del: Option<(&'a [f64], &'a [bool])>,
    pub plh: Option<(&'a [Vec<f64>], &'a [usize])>,
    pub tok: Option<(&'a [Vec<f64>], &'a [TokenId])>,
    pub final_del: Option<(&'a [f64], &'a [bool])>,
}

pub fn distribution_loss(t: &TaskTargets) -> f64 {
    fn nll(p: f64) -> f64 {
        -p.max(f64::MIN_POSITIVE).ln()
    }
    fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
        let n = v.len();
        if n == 0 {
            0.0
        } else {
            v.sum::<f64>() / n as f64
        }
    }
    let binary = |(p, y): (&[f64], &[bool])| mean(p.iter().zip(y).map(|(&p, &y)| nll(if y { p } else { 1.0 - p })));
    let categorical = |dists: &[Vec<f64>], ys: Vec<usize>| mean(dists.iter().zip(ys).map(|(d, y)| nll(d[y])));
    t.init_del.map_or(0.0, binary)
        + t.plh.map_or(0.0, |(d, y)| categorical(d, y.to_vec()))
        + t.tok.map_or(0.0, |(d, y)| categorical(d, y.iter().map(|&v| v as usize).collect()))
        + t.final_del.map_or(0.0, binary)
}
