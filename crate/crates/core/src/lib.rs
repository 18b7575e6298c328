//! Translation with translation memories through non-autoregressive editing.
//!
//! The crate is organised along the pipeline:
//!
//! * [`corpus`]: parallel corpus ingestion, deduplication, vocabulary, splits
//!   and a deterministic synthetic corpus generator.
//! * [`tm_index`]: edit-distance similarity and exact fuzzy-match retrieval
//!   backed by an n-gram inverted index.
//! * [`edit_calculus`]: delete / placeholder / fill operations, minimal-edit
//!   alignments, oracle labels and roll-in example generation.
//! * [`policy`]: the edit-policy abstraction with oracle, copy and neural
//!   implementations, plus training and gradient verification.
//! * [`decoder`]: the iterative-refinement loop.
//! * [`eval`]: BLEU, unrelated-token rate, iteration statistics and the
//!   experiment harnesses.

pub mod binio;
pub mod corpus;
pub mod decoder;
pub mod edit_calculus;
pub mod eval;
pub mod policy;
pub mod rng;
pub mod tm_index;

pub use corpus::{SentenceRecord, Vocabulary};
pub use decoder::{decode, DecodeConfig, DecodeTrace, DecoderState, InitMode};
pub use policy::{EditPolicy, PolicyOutput};
pub use tm_index::{Match, NGramIndex};

/// Version string embedded in every artifact this crate writes.
pub const ARTIFACT_VERSION: &str = concat!("tmlevt-", env!("CARGO_PKG_VERSION"));
