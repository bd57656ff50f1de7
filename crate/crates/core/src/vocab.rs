//! Token-id mapping, special tokens, and output-label shuffling.
//!
//! Serialized form: one token per line, id = line number; output-label
//! tokens carry a tab-separated `out` marker so the shuffle domain survives
//! the round-trip without the training data.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Example;

/// Reserved token strings; dataset tokens must never collide with them.
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<io>", "<ex>", "<eos>"];

/// Pad token: fills batch padding and marks "no target" positions.
pub const PAD: usize = 0;
/// Separates an example's input from its output.
pub const IO_DELIM: usize = 1;
/// Separates consecutive examples within a trajectory.
pub const EX_DELIM: usize = 2;
/// Ends an output segment; decoding stops on it.
pub const EOS: usize = 3;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    output_label_ids: BTreeSet<usize>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("unknown id {0}")]
    UnknownId(usize),
    #[error("vocabulary file line {line}: {reason}")]
    Format { line: usize, reason: String },
}

impl Vocabulary {
    /// Builds from a slice of examples (typically the union of splits):
    /// specials first, then dataset tokens in first-occurrence order (input
    /// side before output side per example). Output labels are the tokens
    /// that never occur on any input side.
    pub fn build(examples: &[Example]) -> Vocabulary {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, usize> =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut input_side: BTreeSet<usize> = BTreeSet::new();
        let mut output_side: BTreeSet<usize> = BTreeSet::new();
        for ex in examples {
            for (tokens, side) in [(&ex.input, &mut input_side), (&ex.output, &mut output_side)] {
                for tok in tokens.iter() {
                    let id = *token_to_id.entry(tok.clone()).or_insert_with(|| {
                        id_to_token.push(tok.clone());
                        id_to_token.len() - 1
                    });
                    side.insert(id);
                }
            }
        }
        let output_label_ids = output_side.difference(&input_side).copied().collect();
        Vocabulary { token_to_id, id_to_token, output_label_ids }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Result<usize, VocabError> {
        self.token_to_id.get(token).copied().ok_or_else(|| VocabError::UnknownToken(token.into()))
    }

    pub fn token(&self, id: usize) -> Result<&str, VocabError> {
        self.id_to_token.get(id).map(String::as_str).ok_or(VocabError::UnknownId(id))
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, VocabError> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, VocabError> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }

    /// Ids eligible for label shuffling: tokens occurring only on the output
    /// side of the train split. Specials are never included.
    pub fn output_label_ids(&self) -> &BTreeSet<usize> {
        &self.output_label_ids
    }

    pub fn to_text(&self) -> String {
        let mut text = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            text.push_str(tok);
            if self.output_label_ids.contains(&id) {
                text.push_str("\tout");
            }
            text.push('\n');
        }
        text
    }

    pub fn from_text(text: &str) -> Result<Vocabulary, VocabError> {
        let mut id_to_token = Vec::new();
        let mut output_label_ids = BTreeSet::new();
        for (idx, line) in text.lines().enumerate() {
            let (tok, marker) = match line.split_once('\t') {
                Some((t, m)) => (t, Some(m)),
                None => (line, None),
            };
            if tok.is_empty() {
                return Err(VocabError::Format { line: idx + 1, reason: "empty token".into() });
            }
            match marker {
                None => {}
                Some("out") => {
                    output_label_ids.insert(idx);
                }
                Some(other) => {
                    return Err(VocabError::Format {
                        line: idx + 1,
                        reason: format!("unknown marker {other}"),
                    });
                }
            }
            id_to_token.push(tok.to_string());
        }
        for (i, spec) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(spec) {
                return Err(VocabError::Format {
                    line: i + 1,
                    reason: format!("expected special token {spec}"),
                });
            }
        }
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { token_to_id, id_to_token, output_label_ids })
    }
}

/// A bijection over the output-label ids; identity everywhere else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPermutation {
    mapping: BTreeMap<usize, usize>,
}

impl LabelPermutation {
    pub fn identity(vocab: &Vocabulary) -> LabelPermutation {
        LabelPermutation {
            mapping: vocab.output_label_ids().iter().map(|&i| (i, i)).collect(),
        }
    }

    /// Uniformly random permutation of the output-label ids.
    pub fn sample<R: Rng>(vocab: &Vocabulary, rng: &mut R) -> LabelPermutation {
        let domain: Vec<usize> = vocab.output_label_ids().iter().copied().collect();
        let mut image = domain.clone();
        image.shuffle(rng);
        LabelPermutation { mapping: domain.into_iter().zip(image).collect() }
    }

    /// Explicit mapping; pairs must form a bijection over their own domain.
    pub fn from_pairs(pairs: &[(usize, usize)]) -> LabelPermutation {
        let mapping: BTreeMap<usize, usize> = pairs.iter().copied().collect();
        let domain: BTreeSet<usize> = mapping.keys().copied().collect();
        let image: BTreeSet<usize> = mapping.values().copied().collect();
        assert_eq!(domain, image, "pairs must permute a fixed id set");
        LabelPermutation { mapping }
    }

    pub fn apply_id(&self, id: usize) -> usize {
        self.mapping.get(&id).copied().unwrap_or(id)
    }

    pub fn inverse(&self) -> LabelPermutation {
        LabelPermutation { mapping: self.mapping.iter().map(|(&k, &v)| (v, k)).collect() }
    }

    /// `compose(p2, p1)` applies p1 first: apply(compose(p2, p1)) ==
    /// apply(p2) after apply(p1).
    pub fn compose(p2: &LabelPermutation, p1: &LabelPermutation) -> LabelPermutation {
        let domain: BTreeSet<usize> =
            p1.mapping.keys().chain(p2.mapping.keys()).copied().collect();
        LabelPermutation {
            mapping: domain.into_iter().map(|k| (k, p2.apply_id(p1.apply_id(k)))).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().all(|(&k, &v)| k == v)
    }
}

/// Replaces every output-label occurrence via the permutation; all other
/// ids (input tokens, delimiters, pad) pass through unchanged.
pub fn apply_permutation(token_ids: &[usize], perm: &LabelPermutation) -> Vec<usize> {
    token_ids.iter().map(|&id| perm.apply_id(id)).collect()
}
