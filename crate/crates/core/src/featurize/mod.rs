//! Attribute featurization (pipeline stage 3): tokenize entity attributes,
//! then map token lists to fixed-width vectors either by hierarchical
//! feature hashing or by trained skip-gram embeddings.
//!
//! The token vocabulary is built from the train split only. Entities that
//! first appear at validation or test time contribute nothing to the vocab;
//! their unknown tokens are skipped at embedding time (or hash like any
//! other token). That asymmetry is deliberate: letting test tokens shape
//! the vocabulary would leak future data into training.

mod hash;
mod skipgram;
mod table;

pub use hash::{feature_hash, token_bucket, token_sign};
pub use skipgram::{pair_loss_and_grads, train_skipgram, SkipgramParams, SkipgramOutput};
pub use table::EmbeddingTable;

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::ingest::{Entity, EntityKind, ProvGraph};
use crate::Real;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("embedding dim must be at least 8 and divisible by 4, got {dim}")]
    BadDim { dim: usize },
    #[error("no tokens survive min_count={min_count}; vocabulary is empty")]
    EmptyVocab { min_count: u64 },
    #[error("bad skip-gram parameter: {what}")]
    BadParam { what: String },
    #[error("embedding method requires a trained table, none provided")]
    MissingTable,
    #[error("unknown featurization method {name:?}")]
    UnknownMethod { name: String },
    #[error("embedding table io at {path}: {message}")]
    TableIo { path: PathBuf, message: String },
}

/// Which attributes feed tokenization, per entity kind, in config order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub subject: Vec<String>,
    pub file: Vec<String>,
    pub netflow: Vec<String>,
}

impl FeatureSpec {
    /// The attribute lists used by the reference configs.
    pub fn reference() -> FeatureSpec {
        FeatureSpec {
            subject: vec!["type".into(), "path".into(), "cmd_line".into()],
            file: vec!["type".into(), "path".into()],
            netflow: vec!["type".into(), "remote_ip".into(), "remote_port".into()],
        }
    }

    pub fn attrs_for(&self, kind: EntityKind) -> &[String] {
        match kind {
            EntityKind::Subject => &self.subject,
            EntityKind::File => &self.file,
            EntityKind::Netflow => &self.netflow,
        }
    }
}

/// Split one attribute value into tokens. Paths split on `/`, command lines
/// on whitespace, addresses on `.`; ports and type labels stay whole.
fn split_attr(key: &str, value: &str) -> Vec<String> {
    let parts: Vec<&str> = match key {
        "path" => value.split('/').collect(),
        "cmd_line" => value.split_whitespace().collect(),
        "remote_ip" => value.split('.').collect(),
        _ => vec![value],
    };
    parts.into_iter().filter(|p| !p.is_empty()).map(|p| p.to_string()).collect()
}

/// Token list for one entity: the kind token, then each configured
/// attribute's tokens in spec order. Missing attributes contribute nothing.
pub fn tokenize(e: &Entity, spec: &FeatureSpec) -> Vec<String> {
    let mut tokens = vec![e.kind.as_str().to_string()];
    for key in spec.attrs_for(e.kind) {
        if let Some(value) = e.attrs.get(key) {
            tokens.extend(split_attr(key, value));
        }
    }
    tokens
}

// ── Corpus ───────────────────────────────────────────────────────────────

/// One sentence per distinct entity (from configured attributes), plus the
/// min-count-filtered vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    pub sentences: Vec<Vec<String>>,
    /// token -> (index, count). Indices are assigned in sorted token order.
    pub vocab: BTreeMap<String, (usize, u64)>,
}

impl TokenCorpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

/// Build the training corpus from a set of windows (callers pass the train
/// split). Each entity contributes one sentence; an entity seen in several
/// windows contributes once, with the attributes of its latest appearance.
/// Sentences are ordered by entity id so corpus construction is independent
/// of window iteration details.
pub fn build_corpus(windows: &[ProvGraph], spec: &FeatureSpec, min_count: u64) -> TokenCorpus {
    let mut latest: BTreeMap<crate::ingest::EntityId, Entity> = BTreeMap::new();
    for w in windows {
        for ent in w.nodes.values() {
            latest.insert(ent.id, ent.clone());
        }
    }
    let sentences: Vec<Vec<String>> = latest.values().map(|e| tokenize(e, spec)).collect();

    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for s in &sentences {
        for t in s {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    let vocab = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .enumerate()
        .map(|(i, (t, c))| (t, (i, c)))
        .collect();
    TokenCorpus { sentences, vocab }
}

// ── Node embedding ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMethod {
    Hash,
    Skipgram,
}

/// Parse a config method name. `word2vec` and `fasttext` differ only in
/// training defaults; both embed via skip-gram lookup.
pub fn parse_method(name: &str) -> Result<EmbedMethod, FeaturizeError> {
    match name {
        "hfh" => Ok(EmbedMethod::Hash),
        "word2vec" | "fasttext" => Ok(EmbedMethod::Skipgram),
        other => Err(FeaturizeError::UnknownMethod { name: other.to_string() }),
    }
}

pub const KIND_ONE_HOT: usize = 3;

/// Fixed-width vector for one entity: `dim` featurized values followed by a
/// 3-wide one-hot of the entity kind. Skip-gram embeds as the mean of
/// in-vocabulary token vectors; an all-OOV entity gets the zero vector (its
/// kind one-hot still carries signal).
pub fn embed_node(
    e: &Entity,
    method: EmbedMethod,
    table: Option<&EmbeddingTable>,
    dim: usize,
    spec: &FeatureSpec,
) -> Result<Vec<Real>, FeaturizeError> {
    let tokens = tokenize(e, spec);
    let mut out = match method {
        EmbedMethod::Hash => feature_hash(&tokens, dim)?,
        EmbedMethod::Skipgram => {
            let table = table.ok_or(FeaturizeError::MissingTable)?;
            let mut acc = vec![0.0; table.dim];
            let mut n = 0usize;
            for t in &tokens {
                if let Some(v) = table.vector(t) {
                    for (a, x) in acc.iter_mut().zip(v) {
                        *a += x;
                    }
                    n += 1;
                }
            }
            if n > 0 {
                for a in &mut acc {
                    *a /= n as Real;
                }
            }
            acc
        }
    };
    let mut one_hot = [0.0; KIND_ONE_HOT];
    one_hot[e.kind.index()] = 1.0;
    out.extend_from_slice(&one_hot);
    Ok(out)
}

// ── Tests ────────────────────────────────────────────────────────────────
