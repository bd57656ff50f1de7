//! Dataset loading and the per-dataset output preprocessing pipelines.

pub mod cogs;
pub mod geo;
pub mod mini;
pub mod scan;

use std::fmt;
use std::path::Path;

use crate::vocab::SPECIAL_TOKENS;

/// One input sequence paired with one output sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<String>,
    pub output: Vec<String>,
    pub id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// A named split of a sequence-to-sequence dataset. Example ids are dense
/// 0..N-1 in file order; duplicate lines are kept (multiset semantics).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqDataset {
    pub examples: Vec<Example>,
    pub name: String,
    pub split: Split,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DataError {
    #[error("{path}: {kind}")]
    Io { path: String, kind: std::io::ErrorKind },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("a generated split is empty: the holdout must leave at least one modifier demonstration in training and at least one phrase in test")]
    EmptySplit,
    #[error("malformed compressed sequence at token {position}: {reason}")]
    Decode { position: usize, reason: String },
}

/// Loads a TSV of `input<TAB>output` lines, whitespace-tokenized.
pub fn load_tsv(path: &Path, name: &str, split: Split) -> Result<SeqDataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        kind: e.kind(),
    })?;
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let (lhs, rhs) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: lineno,
            reason: "missing tab separator".into(),
        })?;
        let input: Vec<String> = lhs.split_whitespace().map(str::to_string).collect();
        let output: Vec<String> = rhs.split_whitespace().map(str::to_string).collect();
        if input.is_empty() || output.is_empty() {
            return Err(DataError::Parse { line: lineno, reason: "empty side".into() });
        }
        for tok in input.iter().chain(&output) {
            if SPECIAL_TOKENS.contains(&tok.as_str()) {
                return Err(DataError::Parse {
                    line: lineno,
                    reason: format!("token {tok} is reserved"),
                });
            }
        }
        examples.push(Example { input, output, id: examples.len() });
    }
    Ok(SeqDataset { examples, name: name.to_string(), split })
}

/// Writes a dataset back to `input<TAB>output` lines, single-space joined.
pub fn save_tsv(dataset: &SeqDataset, path: &Path) -> Result<(), DataError> {
    let mut text = String::new();
    for ex in &dataset.examples {
        text.push_str(&ex.input.join(" "));
        text.push('\t');
        text.push_str(&ex.output.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        kind: e.kind(),
    })
}

/// Removes exact duplicates by (input, output), keeping first occurrence and
/// reassigning dense ids. Entity placeholding collapses GEO-style train sets.
pub fn dedup_examples(dataset: &SeqDataset) -> SeqDataset {
    let mut seen = std::collections::HashSet::new();
    let mut examples = Vec::new();
    for ex in &dataset.examples {
        let key = (ex.input.clone(), ex.output.clone());
        if seen.insert(key) {
            examples.push(Example {
                input: ex.input.clone(),
                output: ex.output.clone(),
                id: examples.len(),
            });
        }
    }
    SeqDataset { examples, name: dataset.name.clone(), split: dataset.split }
}

/// Mean and maximum output length, reported by the preprocessing command.
pub fn output_length_stats(dataset: &SeqDataset) -> (f64, usize) {
    let lens: Vec<usize> = dataset.examples.iter().map(|e| e.output.len()).collect();
    let max = lens.iter().copied().max().unwrap_or(0);
    let avg = if lens.is_empty() {
        0.0
    } else {
        lens.iter().sum::<usize>() as f64 / lens.len() as f64
    };
    (avg, max)
}
