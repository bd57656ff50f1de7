//! A small synthetic command language for fast end-to-end runs: nonsense
//! primitives and repetition modifiers, with chosen primitive-modifier
//! combinations held out of training so the test set measures
//! recombination of parts seen separately.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Example, SeqDataset, Split};

/// Grammar definition: primitive words with their action tokens, modifier
/// words with their repetition counts, and the held-out combinations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniGrammar {
    /// (command word, action token), e.g. ("dax", "DAX").
    pub primitives: Vec<(String, String)>,
    /// (modifier word, repetition count), e.g. ("twice", 2).
    pub modifiers: Vec<(String, usize)>,
    /// (primitive word, modifier word) pairs reserved for the test split.
    pub holdout: Vec<(String, String)>,
}

impl MiniGrammar {
    /// Four primitives, three modifiers, with every `dax` combination held
    /// out: 16 phrases total, 13 train and 3 test.
    pub fn standard() -> Self {
        MiniGrammar {
            primitives: ["dax", "lug", "wif", "zup"]
                .iter()
                .map(|w| (w.to_string(), w.to_uppercase()))
                .collect(),
            modifiers: vec![
                ("twice".into(), 2),
                ("thrice".into(), 3),
                ("quad".into(), 4),
            ],
            holdout: ["twice", "thrice", "quad"]
                .iter()
                .map(|m| ("dax".to_string(), m.to_string()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("grammar serializes");
        std::fs::write(path, text).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            kind: e.kind(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            kind: e.kind(),
        })?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: 0,
            reason: format!("grammar file: {e}"),
        })
    }

    fn render(&self, action: &str, count: usize) -> Vec<String> {
        if count == 1 {
            vec![action.to_string()]
        } else {
            vec![action.to_string(), "*".into(), count.to_string()]
        }
    }

    /// Generates the train/test splits. Bare primitives always train; each
    /// primitive-modifier combination goes to test when held out and to
    /// train otherwise. Train order is shuffled by `seed`. Errors when the
    /// holdout leaves no modifier demonstration in training or no test
    /// phrase to measure.
    pub fn generate(&self, seed: u64) -> Result<(SeqDataset, SeqDataset), DataError> {
        let mut train: Vec<Example> = Vec::new();
        let mut test: Vec<Example> = Vec::new();
        for (word, act) in &self.primitives {
            train.push(Example {
                input: vec![word.clone()],
                output: self.render(act, 1),
                id: 0,
            });
        }
        let mut train_has_modifier = false;
        for (word, act) in &self.primitives {
            for (modifier, count) in &self.modifiers {
                let ex = Example {
                    input: vec![word.clone(), modifier.clone()],
                    output: self.render(act, *count),
                    id: 0,
                };
                let held_out = self
                    .holdout
                    .iter()
                    .any(|(p, m)| p == word && m == modifier);
                if held_out {
                    test.push(ex);
                } else {
                    train_has_modifier = true;
                    train.push(ex);
                }
            }
        }
        if test.is_empty() || (!self.modifiers.is_empty() && !train_has_modifier) {
            return Err(DataError::EmptySplit);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train.shuffle(&mut rng);
        // Ids are unique across the two splits so a support pool and a
        // query set from different splits never alias.
        for (i, ex) in train.iter_mut().enumerate() {
            ex.id = i;
        }
        for (i, ex) in test.iter_mut().enumerate() {
            ex.id = train.len() + i;
        }
        Ok((
            SeqDataset { examples: train, name: "mini".into(), split: Split::Train },
            SeqDataset { examples: test, name: "mini".into(), split: Split::Test },
        ))
    }
}
