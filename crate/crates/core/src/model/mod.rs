//! Causal decoder-only Transformer over the trajectory token stream:
//! learned embeddings plus fixed sinusoidal position encodings, stacked
//! self-attention/feed-forward blocks in either pre- or post-normalization
//! arrangement, and a linear readout to vocabulary logits. Forward passes
//! run on a fresh gradient tape; parameters live outside the tape and are
//! bound once per pass.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use crate::trajectory::Batch;
use crate::vocab::EOS;

/// Architecture and regularization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub dropout: f32,
    /// `true` normalizes sublayer inputs (pre-norm); `false` normalizes
    /// residual sums (post-norm).
    pub pre_norm: bool,
}

impl ModelConfig {
    /// The full-scale configuration: 8 layers, 8 heads, width 512,
    /// feed-forward 2048.
    pub fn full_scale(vocab: usize, max_len: usize) -> Self {
        ModelConfig {
            layers: 8,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            vocab,
            max_len,
            dropout: 0.1,
            pre_norm: true,
        }
    }

    /// A small configuration that trains in minutes on one CPU core.
    pub fn desk(vocab: usize, max_len: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab,
            max_len,
            dropout: 0.1,
            pre_norm: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0
            || self.heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.max_len == 0
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 5 {
            return Err(ModelError::Config(
                "vocabulary must hold the four specials and at least one token".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let ff = self.d_ff;
        let mut out = vec![("embed".to_string(), vec![self.vocab, d])];
        for l in 0..self.layers {
            for part in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layer{l}.attn.{part}"), vec![d, d]));
                out.push((format!("layer{l}.attn.{}", part.replace('w', "b")), vec![d]));
            }
            out.push((format!("layer{l}.ln1.gain"), vec![d]));
            out.push((format!("layer{l}.ln1.bias"), vec![d]));
            out.push((format!("layer{l}.ff.w1"), vec![d, ff]));
            out.push((format!("layer{l}.ff.b1"), vec![ff]));
            out.push((format!("layer{l}.ff.w2"), vec![ff, d]));
            out.push((format!("layer{l}.ff.b2"), vec![d]));
            out.push((format!("layer{l}.ln2.gain"), vec![d]));
            out.push((format!("layer{l}.ln2.bias"), vec![d]));
        }
        out.push(("out.w".to_string(), vec![d, self.vocab]));
        out.push(("out.b".to_string(), vec![self.vocab]));
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the maximum context of {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenRange { id: usize, vocab: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One named tensor of trainable values.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Insertion-ordered collection of parameters; the order fixes the
/// checkpoint layout and the optimizer's state alignment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f32>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name} shape/value mismatch"
        );
        assert!(
            self.index.insert(name.to_string(), self.entries.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.entries.push(Parameter { name: name.to_string(), shape, values });
    }

    pub fn get(&self, name: &str) -> &Parameter {
        &self.entries[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter {
        let i = self.index[name];
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.values.len()).sum()
    }
}

/// Whether a forward pass applies dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How a greedy decode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStop {
    /// The model emitted the end-of-sequence marker.
    Eos,
    /// The per-query generation budget ran out first.
    Budget,
    /// The context window filled up before the sequence ended.
    ContextFull,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated tokens, end-of-sequence marker excluded.
    pub tokens: Vec<usize>,
    pub stop: DecodeStop,
}

/// Model = configuration + parameters + the fixed position table.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
    position_table: Vec<f32>,
}

/// Parameters registered on a tape for one forward pass.
pub struct Bound {
    nodes: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn node(&self, name: &str) -> NodeId {
        self.nodes[self.index[name]]
    }
}

fn position_table(max_len: usize, d: usize) -> Vec<f32> {
    let mut pe = vec![0.0f32; max_len * d];
    for pos in 0..max_len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let rate = (pos as f64) / 10000f64.powf(2.0 * pair / d as f64);
            pe[pos * d + j] = if j % 2 == 0 { rate.sin() } else { rate.cos() } as f32;
        }
    }
    pe
}

impl Model {
    /// Initializes parameters: embeddings from a unit normal, linear
    /// weights and biases uniform in +/- 1/sqrt(fan_in), normalization
    /// gains one and biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut params = ParameterStore::new();
        for (name, shape) in config.layout() {
            let len: usize = shape.iter().product();
            let values: Vec<f32> = if name == "embed" {
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; len]
            } else if name.ends_with(".bias") {
                vec![0.0; len]
            } else {
                // Weight matrices are [fan_in, fan_out]; each bias shares
                // its layer's fan_in.
                let fan_in = match name.as_str() {
                    n if n.ends_with(".w1") || n.ends_with(".b1") => config.d_model,
                    n if n.ends_with(".w2") || n.ends_with(".b2") => config.d_ff,
                    n if n == "out.w" || n == "out.b" => config.d_model,
                    _ => config.d_model, // attention weights and biases
                };
                let bound = 1.0 / (fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..len).map(|_| dist.sample(&mut rng)).collect()
            };
            params.insert(&name, shape, values);
        }
        let position_table = position_table(config.max_len, config.d_model);
        Ok(Model { config, params, position_table })
    }

    /// Rebuilds the derived position table after loading parameters.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Model, ModelError> {
        config.validate()?;
        let position_table = position_table(config.max_len, config.d_model);
        Ok(Model { config, params, position_table })
    }

    /// Registers every parameter on the tape. Trainable binding tracks
    /// gradients; evaluation binding does not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut nodes = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let t = Tensor::from_vec(p.shape.clone(), p.values.clone())
                .expect("stored parameter shapes are consistent");
            let id = if trainable { tape.param(t) } else { tape.leaf(t) };
            nodes.push(id);
            index.insert(p.name.clone(), i);
        }
        Bound { nodes, index }
    }

    /// Causal attention mask for a sequence of `len` tokens whose first
    /// `key_len` positions are real: position i may attend to j iff
    /// `j <= i` and `j < key_len`; everything else gets a large negative
    /// additive penalty.
    fn attention_mask(len: usize, key_len: usize) -> Vec<f32> {
        let mut m = vec![0.0f32; len * len];
        for i in 0..len {
            for j in 0..len {
                if j > i || j >= key_len {
                    m[i * len + j] = -1e9;
                }
            }
        }
        m
    }

    fn apply_dropout<R: Rng>(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId, ModelError> {
        if mode == Mode::Train && self.config.dropout > 0.0 {
            Ok(tape.dropout(x, self.config.dropout, rng)?)
        } else {
            Ok(x)
        }
    }

    fn layer_norm(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: NodeId,
        name: &str,
    ) -> Result<NodeId, ModelError> {
        let gain = bound.node(&format!("{name}.gain"));
        let bias = bound.node(&format!("{name}.bias"));
        Ok(tape.layer_norm(x, gain, bias, 1e-5)?)
    }

    fn linear(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: NodeId,
        w: &str,
        b: &str,
    ) -> Result<NodeId, ModelError> {
        let xw = tape.matmul(x, bound.node(w))?;
        Ok(tape.add_bias(xw, bound.node(b))?)
    }

    fn self_attention<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: NodeId,
        layer: usize,
        mask: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId, ModelError> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let p = format!("layer{layer}.attn");
        let q = self.linear(tape, bound, x, &format!("{p}.wq"), &format!("{p}.bq"))?;
        let k = self.linear(tape, bound, x, &format!("{p}.wk"), &format!("{p}.bk"))?;
        let v = self.linear(tape, bound, x, &format!("{p}.wv"), &format!("{p}.bv"))?;
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f32).sqrt());
            let masked = tape.add(scaled, mask)?;
            let weights = tape.softmax(masked);
            let weights = self.apply_dropout(tape, weights, mode, rng)?;
            head_outputs.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat_cols(&head_outputs)?;
        self.linear(tape, bound, merged, &format!("{p}.wo"), &format!("{p}.bo"))
    }

    fn feed_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: NodeId,
        layer: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId, ModelError> {
        let p = format!("layer{layer}.ff");
        let h = self.linear(tape, bound, x, &format!("{p}.w1"), &format!("{p}.b1"))?;
        let h = tape.relu(h);
        let h = self.apply_dropout(tape, h, mode, rng)?;
        self.linear(tape, bound, h, &format!("{p}.w2"), &format!("{p}.b2"))
    }

    /// Runs one sequence through the network and returns `[len, vocab]`
    /// logits. `key_len` marks how many leading positions are real; the
    /// rest are padding that no real position attends to.
    pub fn forward_row<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &[usize],
        key_len: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId, ModelError> {
        let len = ids.len();
        if len == 0 {
            return Err(ModelError::Config("empty sequence".into()));
        }
        if len > self.config.max_len {
            return Err(ModelError::TooLong { len, max: self.config.max_len });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab) {
            return Err(ModelError::TokenRange { id: bad, vocab: self.config.vocab });
        }
        let d = self.config.d_model;
        let emb = tape.embedding(bound.node("embed"), ids)?;
        let pe = tape.leaf(
            Tensor::from_vec(vec![len, d], self.position_table[..len * d].to_vec())
                .expect("position table slice"),
        );
        let mut x = tape.add(emb, pe)?;
        let mask = tape.leaf(
            Tensor::from_vec(vec![len, len], Self::attention_mask(len, key_len))
                .expect("mask shape"),
        );
        for l in 0..self.config.layers {
            if self.config.pre_norm {
                let a_in = self.layer_norm(tape, bound, x, &format!("layer{l}.ln1"))?;
                let attn = self.self_attention(tape, bound, a_in, l, mask, mode, rng)?;
                let attn = self.apply_dropout(tape, attn, mode, rng)?;
                x = tape.add(x, attn)?;
                let f_in = self.layer_norm(tape, bound, x, &format!("layer{l}.ln2"))?;
                let ff = self.feed_forward(tape, bound, f_in, l, mode, rng)?;
                let ff = self.apply_dropout(tape, ff, mode, rng)?;
                x = tape.add(x, ff)?;
            } else {
                let attn = self.self_attention(tape, bound, x, l, mask, mode, rng)?;
                let attn = self.apply_dropout(tape, attn, mode, rng)?;
                let sum = tape.add(x, attn)?;
                x = self.layer_norm(tape, bound, sum, &format!("layer{l}.ln1"))?;
                let ff = self.feed_forward(tape, bound, x, l, mode, rng)?;
                let ff = self.apply_dropout(tape, ff, mode, rng)?;
                let sum = tape.add(x, ff)?;
                x = self.layer_norm(tape, bound, sum, &format!("layer{l}.ln2"))?;
            }
        }
        let xw = tape.matmul(x, bound.node("out.w"))?;
        Ok(tape.add_bias(xw, bound.node("out.b"))?)
    }

    /// Mean over rows of each row's masked-mean cross-entropy. Returns the
    /// scalar loss node, the number of target positions, and whether any
    /// row had no targets at all.
    pub fn batch_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &Batch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(NodeId, usize, bool), ModelError> {
        assert!(batch.rows > 0, "empty batch");
        let mut row_losses = Vec::with_capacity(batch.rows);
        let mut total_targets = 0usize;
        let mut any_untargeted = false;
        for r in 0..batch.rows {
            let base = r * batch.len;
            let ids = &batch.tokens[base..base + batch.len];
            let logits =
                self.forward_row(tape, bound, ids, batch.row_lens[r], mode, rng)?;
            let mut targets = vec![0usize; batch.len];
            let mut mask = vec![false; batch.len];
            for (i, t) in batch.targets[base..base + batch.len].iter().enumerate() {
                if let Some(id) = t {
                    targets[i] = *id;
                    mask[i] = true;
                    total_targets += 1;
                }
            }
            let (loss, untargeted) = tape.masked_cross_entropy(logits, &targets, &mask)?;
            any_untargeted |= untargeted;
            row_losses.push(loss);
        }
        let mut acc = row_losses[0];
        for &l in &row_losses[1..] {
            acc = tape.add(acc, l)?;
        }
        let loss = tape.scale(acc, 1.0 / batch.rows as f32);
        Ok((loss, total_targets, any_untargeted))
    }

    /// Greedy decoding: repeatedly appends the highest-logit token (lowest
    /// id on ties) until the end-of-sequence marker, the generation budget,
    /// or the context limit.
    pub fn greedy_decode(
        &self,
        prompt: &[usize],
        budget: usize,
    ) -> Result<Decoded, ModelError> {
        let mut seq = prompt.to_vec();
        let mut tokens = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0); // never consulted in Eval mode
        for _ in 0..budget {
            if seq.len() >= self.config.max_len {
                return Ok(Decoded { tokens, stop: DecodeStop::ContextFull });
            }
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let logits =
                self.forward_row(&mut tape, &bound, &seq, seq.len(), Mode::Eval, &mut rng)?;
            let t = tape.value(logits);
            let vocab = self.config.vocab;
            let last = &t.data()[(seq.len() - 1) * vocab..seq.len() * vocab];
            let mut best = 0usize;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                return Ok(Decoded { tokens, stop: DecodeStop::Eos });
            }
            tokens.push(best);
            seq.push(best);
        }
        Ok(Decoded { tokens, stop: DecodeStop::Budget })
    }
}
