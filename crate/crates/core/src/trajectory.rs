//! Trajectory construction: turning an ordered run of dataset examples into
//! one token sequence with next-token targets.
//!
//! Layout per example: `input.. <io> output.. <eos>`, with `<ex>` between
//! consecutive examples. Targets cover exactly the span that predicts an
//! example's output: the `<io>` position predicts the first output token,
//! each output token predicts its successor, and the last output token
//! predicts `<eos>`. The first example of a multi-example trajectory is
//! fully untargeted — it can only be conditioned on — and every later
//! example is trained. A single-example trajectory trains its only example.

use rand::Rng;

use crate::data::Example;
use crate::vocab::{LabelPermutation, VocabError, Vocabulary, EOS, EX_DELIM, IO_DELIM, PAD};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("trajectory needs at least one example")]
    NoExamples,
    #[error("dataset has {have} examples but an ordering of {need} distinct examples was requested")]
    NotEnoughExamples { have: usize, need: usize },
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Index bookkeeping for one example inside a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    /// First input-token position.
    pub start: usize,
    /// Position of the input/output delimiter.
    pub delim: usize,
    /// Position of the end-of-sequence marker.
    pub eos: usize,
}

/// One training sequence: token ids, per-position targets (`None` where the
/// position contributes no loss), and where each example landed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    /// Dataset ids of the examples, in trajectory order.
    pub example_ids: Vec<usize>,
    pub spans: Vec<Span>,
    /// The output-label relabeling applied to every output segment.
    pub permutation: LabelPermutation,
}

impl Trajectory {
    /// Lays out `examples` in the given order and fills in targets. The
    /// permutation relabels output tokens on every example consistently.
    pub fn assemble(
        vocab: &Vocabulary,
        examples: &[&Example],
        permutation: LabelPermutation,
    ) -> Result<Trajectory, TrajectoryError> {
        if examples.is_empty() {
            return Err(TrajectoryError::NoExamples);
        }
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        let mut spans = Vec::new();
        let train_first = examples.len() == 1;
        for (j, ex) in examples.iter().enumerate() {
            if j > 0 {
                tokens.push(EX_DELIM);
                targets.push(None);
            }
            let start = tokens.len();
            for tok in &ex.input {
                tokens.push(vocab.id(tok)?);
                targets.push(None);
            }
            let delim = tokens.len();
            tokens.push(IO_DELIM);
            let mut output_ids = Vec::with_capacity(ex.output.len());
            for tok in &ex.output {
                output_ids.push(permutation.apply_id(vocab.id(tok)?));
            }
            let trained = j > 0 || train_first;
            // The delimiter predicts the first output token; each output
            // token predicts the next; the last predicts end-of-sequence.
            let first = output_ids.first().copied().unwrap_or(EOS);
            targets.push(if trained { Some(first) } else { None });
            for (t, &id) in output_ids.iter().enumerate() {
                tokens.push(id);
                let next = output_ids.get(t + 1).copied().unwrap_or(EOS);
                targets.push(if trained { Some(next) } else { None });
            }
            let eos = tokens.len();
            tokens.push(EOS);
            targets.push(None);
            spans.push(Span { start, delim, eos });
        }
        Ok(Trajectory {
            tokens,
            targets,
            example_ids: examples.iter().map(|e| e.id).collect(),
            spans,
            permutation,
        })
    }

    /// Positions that contribute to the loss.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Human-readable dump: one line per position with token, target, and
    /// mask flag.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (i, &tok) in self.tokens.iter().enumerate() {
            let tok_s = vocab.token(tok).unwrap_or("?");
            let tgt_s = match self.targets[i] {
                Some(t) => vocab.token(t).unwrap_or("?").to_string(),
                None => "-".to_string(),
            };
            out.push_str(&format!("{i:4}  {tok_s:12} -> {tgt_s}\n"));
        }
        out
    }
}

/// Draws an ordering of `m` distinct example indices uniformly at random
/// (a uniform draw over all N!/(N-m)! orderings).
pub fn sample_ordering<R: Rng>(
    rng: &mut R,
    dataset_len: usize,
    m: usize,
) -> Result<Vec<usize>, TrajectoryError> {
    if m == 0 {
        return Err(TrajectoryError::NoExamples);
    }
    if dataset_len < m {
        return Err(TrajectoryError::NotEnoughExamples { have: dataset_len, need: m });
    }
    // Partial Fisher-Yates: the first m slots of a shuffle are a uniform
    // ordering without replacement.
    let mut indices: Vec<usize> = (0..dataset_len).collect();
    for i in 0..m {
        let j = rng.gen_range(i..dataset_len);
        indices.swap(i, j);
    }
    indices.truncate(m);
    Ok(indices)
}

/// Samples a trajectory: an ordering of `m` distinct examples, optionally a
/// fresh output-label permutation, then assembly.
pub fn sample_trajectory<R: Rng>(
    rng: &mut R,
    vocab: &Vocabulary,
    examples: &[Example],
    m: usize,
    shuffle_output_labels: bool,
) -> Result<Trajectory, TrajectoryError> {
    let ordering = sample_ordering(rng, examples.len(), m)?;
    let permutation = if shuffle_output_labels {
        LabelPermutation::sample(vocab, rng)
    } else {
        LabelPermutation::identity(vocab)
    };
    let chosen: Vec<&Example> = ordering.iter().map(|&i| &examples[i]).collect();
    Trajectory::assemble(vocab, &chosen, permutation)
}

/// Builds the evaluation prompt: `k` support examples laid out exactly as
/// in training, then the query input and its delimiter. Generation starts
/// after the delimiter.
pub fn prompt_tokens(
    vocab: &Vocabulary,
    supports: &[&Example],
    query_input: &[String],
    permutation: &LabelPermutation,
) -> Result<Vec<usize>, TrajectoryError> {
    let mut tokens = Vec::new();
    for ex in supports {
        for tok in &ex.input {
            tokens.push(vocab.id(tok)?);
        }
        tokens.push(IO_DELIM);
        for tok in &ex.output {
            tokens.push(permutation.apply_id(vocab.id(tok)?));
        }
        tokens.push(EOS);
        tokens.push(EX_DELIM);
    }
    for tok in query_input {
        tokens.push(vocab.id(tok)?);
    }
    tokens.push(IO_DELIM);
    Ok(tokens)
}

/// A right-padded batch of trajectories. Padding positions carry no target
/// and sit outside every row's true length, so attention and loss both skip
/// them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub rows: usize,
    pub len: usize,
    pub row_lens: Vec<usize>,
}

impl Batch {
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Batch {
        let rows = trajectories.len();
        let len = trajectories.iter().map(Trajectory::len).max().unwrap_or(0);
        let mut tokens = vec![PAD; rows * len];
        let mut targets = vec![None; rows * len];
        let mut row_lens = Vec::with_capacity(rows);
        for (r, traj) in trajectories.iter().enumerate() {
            let base = r * len;
            tokens[base..base + traj.len()].copy_from_slice(&traj.tokens);
            targets[base..base + traj.len()].clone_from_slice(&traj.targets);
            row_lens.push(traj.len());
        }
        Batch { tokens, targets, rows, len, row_lens }
    }
}
