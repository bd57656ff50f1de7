//! Run configuration: a plain-text `section.key = value` format, built-in
//! presets, and command-line overrides. Unknown keys are rejected with the
//! full list of valid ones so typos surface immediately.

use std::fmt::Write as _;

use micl_core::model::ModelConfig;
use micl_core::train::{Algorithm, CheckpointPolicy, OptimConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}; valid keys are: {valid}")]
    UnknownKey { line: usize, key: String, valid: String },
    #[error("line {line}: {key} = {value:?}: {reason}")]
    BadValue { line: usize, key: String, value: String, reason: String },
    #[error("unknown preset {0:?}; available presets: {1}")]
    UnknownPreset(String, String),
    #[error("{0}")]
    Invalid(String),
}

/// Scoring rule used when comparing a decoded prediction to the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparator {
    /// Token-for-token equality.
    Exact,
    /// Equality of decoded action sequences (repetition-expression
    /// outputs), so equivalent spellings count.
    Actions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSpec {
    pub k: usize,
    pub budget: usize,
    /// How many times each query is evaluated (fresh supports per pass).
    pub repeat: usize,
    pub comparator: Comparator,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub eval: u64,
}

/// Everything a run needs, resolved from preset/file plus overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub eval: EvalSpec,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f32,
    pub pre_norm: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpec {
    pub steps: u64,
    pub batch: usize,
    pub m: usize,
    pub shuffle_labels: bool,
    pub algorithm: Algorithm,
    pub lr: f32,
    pub warmup: u64,
    pub clip_norm: Option<f32>,
    pub eval_every: Option<u64>,
    pub policy: CheckpointPolicy,
}

impl RunSpec {
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            d_model: self.model.d_model,
            d_ff: self.model.d_ff,
            vocab,
            max_len: self.model.max_len,
            dropout: self.model.dropout,
            pre_norm: self.model.pre_norm,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch: self.train.batch,
            m: self.train.m,
            shuffle_output_labels: self.train.shuffle_labels,
            optim: OptimConfig {
                algorithm: self.train.algorithm,
                lr: self.train.lr,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                warmup: self.train.warmup,
                clip_norm: self.train.clip_norm,
            },
            eval_every: self.train.eval_every,
            policy: self.train.policy,
            data_seed: self.seeds.data,
            dropout_seed: self.seeds.data.wrapping_add(0x9e3779b97f4a7c15),
        }
    }

    /// Canonical text form: stable ordering, one key per line. Parsing it
    /// back yields the same spec.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.layers = {}", self.model.layers);
        let _ = writeln!(s, "model.heads = {}", self.model.heads);
        let _ = writeln!(s, "model.d-model = {}", self.model.d_model);
        let _ = writeln!(s, "model.d-ff = {}", self.model.d_ff);
        let _ = writeln!(s, "model.max-len = {}", self.model.max_len);
        let _ = writeln!(s, "model.dropout = {}", self.model.dropout);
        let _ = writeln!(s, "model.pre-norm = {}", self.model.pre_norm);
        let _ = writeln!(s, "train.steps = {}", self.train.steps);
        let _ = writeln!(s, "train.batch = {}", self.train.batch);
        let _ = writeln!(s, "train.m = {}", self.train.m);
        let _ = writeln!(s, "train.shuffle-labels = {}", self.train.shuffle_labels);
        let algorithm = match self.train.algorithm {
            Algorithm::RAdam => "radam",
            Algorithm::Adam => "adam",
        };
        let _ = writeln!(s, "train.algorithm = {algorithm}");
        let _ = writeln!(s, "train.lr = {}", self.train.lr);
        let _ = writeln!(s, "train.warmup = {}", self.train.warmup);
        let clip = match self.train.clip_norm {
            Some(c) => c.to_string(),
            None => "none".to_string(),
        };
        let _ = writeln!(s, "train.clip-norm = {clip}");
        let every = match self.train.eval_every {
            Some(e) => e.to_string(),
            None => "none".to_string(),
        };
        let _ = writeln!(s, "train.eval-every = {every}");
        let policy = match self.train.policy {
            CheckpointPolicy::DevBest => "dev-best",
            CheckpointPolicy::Last => "last",
        };
        let _ = writeln!(s, "train.policy = {policy}");
        let _ = writeln!(s, "eval.k = {}", self.eval.k);
        let _ = writeln!(s, "eval.budget = {}", self.eval.budget);
        let _ = writeln!(s, "eval.repeat = {}", self.eval.repeat);
        let comparator = match self.eval.comparator {
            Comparator::Exact => "exact",
            Comparator::Actions => "actions",
        };
        let _ = writeln!(s, "eval.comparator = {comparator}");
        let _ = writeln!(s, "seed.data = {}", self.seeds.data);
        let _ = writeln!(s, "seed.init = {}", self.seeds.init);
        let _ = writeln!(s, "seed.eval = {}", self.seeds.eval);
        s
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.train.policy == CheckpointPolicy::DevBest && self.train.eval_every.is_none() {
            return Err(ConfigError::Invalid(
                "train.policy = dev-best requires train.eval-every".into(),
            ));
        }
        if self.train.m == 0 || self.train.batch == 0 || self.train.steps == 0 {
            return Err(ConfigError::Invalid(
                "train.m, train.batch, and train.steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

const VALID_KEYS: &[&str] = &[
    "model.layers",
    "model.heads",
    "model.d-model",
    "model.d-ff",
    "model.max-len",
    "model.dropout",
    "model.pre-norm",
    "train.steps",
    "train.batch",
    "train.m",
    "train.shuffle-labels",
    "train.algorithm",
    "train.lr",
    "train.warmup",
    "train.clip-norm",
    "train.eval-every",
    "train.policy",
    "eval.k",
    "eval.budget",
    "eval.repeat",
    "eval.comparator",
    "seed.data",
    "seed.init",
    "seed.eval",
];

/// The small fast configuration used by the desk experiments: in-context
/// meta-training on the mini grammar with label shuffling.
const MINI_META_DESK: &str = "\
model.layers = 2
model.heads = 4
model.d-model = 64
model.d-ff = 256
model.max-len = 128
model.dropout = 0
model.pre-norm = true
train.steps = 1200
train.batch = 5
train.m = 10
train.shuffle-labels = true
train.algorithm = radam
train.lr = 0.001
train.warmup = 100
train.clip-norm = 5
train.eval-every = 200
train.policy = dev-best
eval.k = 9
eval.budget = 24
eval.repeat = 8
eval.comparator = exact
seed.data = 1
seed.init = 2
seed.eval = 3
";

/// Ordinary single-example training on the mini grammar (the control the
/// meta run is compared against), evaluated without supports.
const MINI_BASELINE_DESK: &str = "\
model.layers = 2
model.heads = 4
model.d-model = 64
model.d-ff = 256
model.max-len = 128
model.dropout = 0
model.pre-norm = true
train.steps = 600
train.batch = 32
train.m = 1
train.shuffle-labels = false
train.algorithm = radam
train.lr = 0.001
train.warmup = 100
train.clip-norm = 5
train.eval-every = 200
train.policy = dev-best
eval.k = 0
eval.budget = 24
eval.repeat = 1
eval.comparator = exact
seed.data = 1
seed.init = 2
seed.eval = 3
";

/// Full-scale meta run with label shuffling on compressed command data
/// (25 examples per trajectory, batch 5), checkpoint chosen on dev.
const FULL_META_LB: &str = "\
model.layers = 8
model.heads = 8
model.d-model = 512
model.d-ff = 2048
model.max-len = 768
model.dropout = 0.1
model.pre-norm = true
train.steps = 20000
train.batch = 5
train.m = 25
train.shuffle-labels = true
train.algorithm = radam
train.lr = 0.0001
train.warmup = 500
train.clip-norm = 5
train.eval-every = 1000
train.policy = dev-best
eval.k = 24
eval.budget = 20
eval.repeat = 1
eval.comparator = actions
seed.data = 1
seed.init = 2
seed.eval = 3
";

/// Full-scale single-example control (large batches, no shuffling),
/// evaluated without supports.
const FULL_BASELINE: &str = "\
model.layers = 8
model.heads = 8
model.d-model = 512
model.d-ff = 2048
model.max-len = 768
model.dropout = 0.1
model.pre-norm = true
train.steps = 10000
train.batch = 256
train.m = 1
train.shuffle-labels = false
train.algorithm = radam
train.lr = 0.0001
train.warmup = 500
train.clip-norm = 5
train.eval-every = 1000
train.policy = dev-best
eval.k = 0
eval.budget = 20
eval.repeat = 1
eval.comparator = actions
seed.data = 1
seed.init = 2
seed.eval = 3
";

pub const PRESETS: &[(&str, &str)] = &[
    ("mini-meta-desk", MINI_META_DESK),
    ("mini-baseline-desk", MINI_BASELINE_DESK),
    ("full-meta-lb", FULL_META_LB),
    ("full-baseline", FULL_BASELINE),
];

pub fn preset(name: &str) -> Result<RunSpec, ConfigError> {
    let names = || PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ");
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string(), names()))?;
    parse(text)
}

/// Parses the `section.key = value` format. Every key must be present
/// exactly once (presets are complete; partial files are for overrides
/// only via `apply_overrides`).
pub fn parse(text: &str) -> Result<RunSpec, ConfigError> {
    let mut spec = RunSpec {
        model: ModelSpec {
            layers: 0,
            heads: 0,
            d_model: 0,
            d_ff: 0,
            max_len: 0,
            dropout: 0.0,
            pre_norm: true,
        },
        train: TrainSpec {
            steps: 0,
            batch: 0,
            m: 0,
            shuffle_labels: false,
            algorithm: Algorithm::RAdam,
            lr: 0.0,
            warmup: 0,
            clip_norm: None,
            eval_every: None,
            policy: CheckpointPolicy::Last,
        },
        eval: EvalSpec { k: 0, budget: 0, repeat: 1, comparator: Comparator::Exact },
        seeds: Seeds { data: 0, init: 0, eval: 0 },
    };
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: raw.to_string(),
        })?;
        let key = key.trim();
        let value = value.trim();
        set_key(&mut spec, key, value, line)?;
        seen.push(key.to_string());
    }
    for key in VALID_KEYS {
        if !seen.iter().any(|s| s == key) {
            return Err(ConfigError::Invalid(format!("missing key {key}")));
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Applies `key=value` overrides (from `--set`) to an existing spec.
pub fn apply_overrides(spec: &mut RunSpec, overrides: &[String]) -> Result<(), ConfigError> {
    for (i, item) in overrides.iter().enumerate() {
        let line = i + 1;
        let (key, value) = item.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: item.clone(),
        })?;
        set_key(spec, key.trim(), value.trim(), line)?;
    }
    spec.validate()?;
    Ok(())
}

fn set_key(spec: &mut RunSpec, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
    let bad = |reason: &str| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    };
    macro_rules! num {
        ($t:ty) => {
            value.parse::<$t>().map_err(|e| bad(&e.to_string()))?
        };
    }
    let flag = |v: &str| -> Result<bool, ConfigError> {
        match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("expected true or false")),
        }
    };
    match key {
        "model.layers" => spec.model.layers = num!(usize),
        "model.heads" => spec.model.heads = num!(usize),
        "model.d-model" => spec.model.d_model = num!(usize),
        "model.d-ff" => spec.model.d_ff = num!(usize),
        "model.max-len" => spec.model.max_len = num!(usize),
        "model.dropout" => spec.model.dropout = num!(f32),
        "model.pre-norm" => spec.model.pre_norm = flag(value)?,
        "train.steps" => spec.train.steps = num!(u64),
        "train.batch" => spec.train.batch = num!(usize),
        "train.m" => spec.train.m = num!(usize),
        "train.shuffle-labels" => spec.train.shuffle_labels = flag(value)?,
        "train.algorithm" => {
            spec.train.algorithm = match value {
                "radam" => Algorithm::RAdam,
                "adam" => Algorithm::Adam,
                _ => return Err(bad("expected radam or adam")),
            }
        }
        "train.lr" => spec.train.lr = num!(f32),
        "train.warmup" => spec.train.warmup = num!(u64),
        "train.clip-norm" => {
            spec.train.clip_norm =
                if value == "none" { None } else { Some(num!(f32)) }
        }
        "train.eval-every" => {
            spec.train.eval_every =
                if value == "none" { None } else { Some(num!(u64)) }
        }
        "train.policy" => {
            spec.train.policy = match value {
                "dev-best" => CheckpointPolicy::DevBest,
                "last" => CheckpointPolicy::Last,
                _ => return Err(bad("expected dev-best or last")),
            }
        }
        "eval.k" => spec.eval.k = num!(usize),
        "eval.budget" => spec.eval.budget = num!(usize),
        "eval.repeat" => spec.eval.repeat = num!(usize),
        "eval.comparator" => {
            spec.eval.comparator = match value {
                "exact" => Comparator::Exact,
                "actions" => Comparator::Actions,
                _ => return Err(bad("expected exact or actions")),
            }
        }
        "seed.data" => spec.seeds.data = num!(u64),
        "seed.init" => spec.seeds.init = num!(u64),
        "seed.eval" => spec.seeds.eval = num!(u64),
        _ => {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
                valid: VALID_KEYS.join(", "),
            })
        }
    }
    Ok(())
}
