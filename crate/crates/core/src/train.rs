//! Training loop: trajectory sampling, loss, backprop, rectified-Adam or
//! Adam updates with linear warmup and global-norm clipping, JSONL metrics,
//! and best-on-dev or last checkpoint selection.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::model::{Mode, Model, ModelError};
use crate::tensor::Tape;
use crate::trajectory::{sample_trajectory, Batch, TrajectoryError};
use crate::vocab::Vocabulary;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(
        "loss became non-finite at step {step} (batch drew example ids {example_ids:?}); \
         aborting before the update so the last finite state is preserved"
    )]
    NonFinite { step: u64, example_ids: Vec<usize> },
    #[error("metrics sink: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Rectified Adam: variance-adaptive steps once the variance estimate
    /// is tractable (about five steps in), plain bias-corrected momentum
    /// before that.
    RAdam,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup: the step-t learning rate is lr * min(1, t / warmup).
    pub warmup: u64,
    /// Global-norm clip threshold; None disables clipping.
    pub clip_norm: Option<f32>,
}

impl OptimConfig {
    pub fn standard(algorithm: Algorithm, warmup: u64) -> OptimConfig {
        OptimConfig {
            algorithm,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup,
            clip_norm: Some(5.0),
        }
    }
}

/// First and second gradient moments, one pair of buffers per parameter.
pub struct Optimizer {
    pub config: OptimConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

/// Rectification factor for the variance-adaptive branch. `None` means the
/// variance estimate is still intractable at this step and the update must
/// fall back to bias-corrected momentum alone.
pub fn rectification_factor(step: u64, beta2: f64) -> Option<f64> {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(step as i32);
    let rho = rho_inf - 2.0 * step as f64 * b2t / (1.0 - b2t);
    if rho > 5.0 {
        let num = (rho - 4.0) * (rho - 2.0) * rho_inf;
        let den = (rho_inf - 4.0) * (rho_inf - 2.0) * rho;
        Some((num / den).sqrt())
    } else {
        None
    }
}

/// Euclidean norm over a set of gradient buffers, accumulated in f64.
pub fn global_norm(grads: &[Vec<f32>]) -> f32 {
    let mut acc = 0.0f64;
    for g in grads {
        for &x in g {
            acc += (x as f64) * (x as f64);
        }
    }
    acc.sqrt() as f32
}

/// Scales gradients in place so their global norm does not exceed `max`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max: f32) -> f32 {
    let norm = global_norm(grads);
    if norm > max {
        let scale = max / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

pub struct StepStats {
    pub lr: f32,
    pub grad_norm: f32,
}

impl Optimizer {
    pub fn new(config: OptimConfig, model: &Model) -> Optimizer {
        let m = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        let v = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Optimizer { config, m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate for 1-based step `t` under linear warmup.
    pub fn lr_at(&self, t: u64) -> f32 {
        if self.config.warmup == 0 || t >= self.config.warmup {
            self.config.lr
        } else {
            self.config.lr * (t as f64 / self.config.warmup as f64) as f32
        }
    }

    /// Applies one update. `grads` must align with the model's parameter
    /// order; clipping (if configured) happens in place first.
    pub fn apply(&mut self, model: &mut Model, grads: &mut [Vec<f32>]) -> StepStats {
        assert_eq!(grads.len(), self.m.len(), "gradient/parameter count mismatch");
        self.step += 1;
        let t = self.step;
        let lr = self.lr_at(t);
        let grad_norm = match self.config.clip_norm {
            Some(max) => clip_global_norm(grads, max),
            None => global_norm(grads),
        };
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let eps = self.config.eps as f32;
        let rect = match self.config.algorithm {
            Algorithm::RAdam => rectification_factor(t, b2),
            Algorithm::Adam => None,
        };
        for (i, param) in model.params.iter_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                m[j] = (b1 as f32) * m[j] + (1.0 - b1 as f32) * g[j];
                v[j] = (b2 as f32) * v[j] + (1.0 - b2 as f32) * g[j] * g[j];
                let m_hat = m[j] / bc1 as f32;
                let update = match self.config.algorithm {
                    Algorithm::Adam => {
                        let denom = v[j].sqrt() / (bc2 as f32).sqrt() + eps;
                        lr * m_hat / denom
                    }
                    Algorithm::RAdam => match rect {
                        Some(r) => {
                            let adaptive = (bc2 as f32).sqrt() / (v[j].sqrt() + eps);
                            lr * m_hat * adaptive * r as f32
                        }
                        None => lr * m_hat,
                    },
                };
                param.values[j] -= update;
            }
        }
        StepStats { lr, grad_norm }
    }
}

/// Which model the run keeps as its result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    /// The checkpoint with the best dev metric; ties keep the earliest.
    DevBest,
    /// The final checkpoint.
    Last,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    /// Trajectories per batch.
    pub batch: usize,
    /// Examples per trajectory.
    pub m: usize,
    pub shuffle_output_labels: bool,
    pub optim: OptimConfig,
    /// Dev evaluation cadence in steps; None disables dev evaluation.
    pub eval_every: Option<u64>,
    pub policy: CheckpointPolicy,
    pub data_seed: u64,
    pub dropout_seed: u64,
}

/// One metrics line per training step.
#[derive(Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

/// One metrics line per dev evaluation.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub dev_seq_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The kept model per the checkpoint policy.
    pub model: Model,
    /// Step whose checkpoint was kept.
    pub kept_step: u64,
    /// Dev metric of the kept checkpoint, when dev evaluation ran.
    pub kept_metric: Option<f64>,
    pub final_loss: f32,
}

/// Runs the training loop. Dev evaluation (when configured) calls
/// `dev_eval` with the current model and records its sequence accuracy;
/// under `CheckpointPolicy::DevBest` the best-scoring step is kept, with
/// ties resolved toward the earliest. Metrics stream to `sink` as JSON
/// lines.
pub fn train(
    mut model: Model,
    examples: &[Example],
    vocab: &Vocabulary,
    config: &TrainConfig,
    mut dev_eval: Option<&mut dyn FnMut(&Model) -> f64>,
    sink: &mut dyn Write,
) -> Result<TrainOutcome, TrainError> {
    if config.batch == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    if config.eval_every == Some(0) {
        return Err(TrainError::Config("eval cadence must be positive".into()));
    }
    if config.policy == CheckpointPolicy::DevBest
        && (config.eval_every.is_none() || dev_eval.is_none())
    {
        return Err(TrainError::Config(
            "best-on-dev checkpoint selection needs a dev evaluator and a cadence".into(),
        ));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.data_seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.dropout_seed);
    let mut optimizer = Optimizer::new(config.optim.clone(), &model);
    let mut best: Option<(u64, f64, Model)> = None;
    let mut final_loss = f32::NAN;

    for step in 1..=config.steps {
        let mut trajectories = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            trajectories.push(sample_trajectory(
                &mut data_rng,
                vocab,
                examples,
                config.m,
                config.shuffle_output_labels,
            )?);
        }
        let batch = Batch::from_trajectories(&trajectories);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let (loss_node, _, _) =
            model.batch_loss(&mut tape, &bound, &batch, Mode::Train, &mut dropout_rng)?;
        let loss = tape.value(loss_node).data()[0];
        if !loss.is_finite() {
            let mut ids: Vec<usize> =
                trajectories.iter().flat_map(|t| t.example_ids.iter().copied()).collect();
            ids.sort_unstable();
            ids.dedup();
            return Err(TrainError::NonFinite { step, example_ids: ids });
        }
        tape.backward(loss_node).unwrap();
        let mut grads: Vec<Vec<f32>> = model
            .params
            .iter()
            .map(|p| {
                tape.grad(bound.node(&p.name))
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.values.len()])
            })
            .collect();
        drop(tape);
        let stats = optimizer.apply(&mut model, &mut grads);
        if !stats.grad_norm.is_finite() {
            let mut ids: Vec<usize> =
                trajectories.iter().flat_map(|t| t.example_ids.iter().copied()).collect();
            ids.sort_unstable();
            ids.dedup();
            return Err(TrainError::NonFinite { step, example_ids: ids });
        }
        final_loss = loss;
        let record = StepRecord { step, loss, lr: stats.lr, grad_norm: stats.grad_norm };
        serde_json::to_writer(&mut *sink, &record).map_err(std::io::Error::other)?;
        sink.write_all(b"\n")?;

        if let (Some(every), Some(eval)) = (config.eval_every, dev_eval.as_deref_mut()) {
            if step % every == 0 || step == config.steps {
                let acc = eval(&model);
                serde_json::to_writer(&mut *sink, &EvalRecord { step, dev_seq_acc: acc })
                    .map_err(std::io::Error::other)?;
                sink.write_all(b"\n")?;
                let better = match &best {
                    None => true,
                    Some((_, best_acc, _)) => acc > *best_acc,
                };
                if better {
                    best = Some((step, acc, model.clone()));
                }
            }
        }
    }
    sink.flush()?;

    let outcome = match (config.policy, best) {
        (CheckpointPolicy::DevBest, Some((kept_step, metric, kept))) => TrainOutcome {
            model: kept,
            kept_step,
            kept_metric: Some(metric),
            final_loss,
        },
        (CheckpointPolicy::DevBest, None) => unreachable!("validated above"),
        (CheckpointPolicy::Last, kept) => TrainOutcome {
            kept_metric: kept.as_ref().map(|(_, acc, _)| *acc),
            model,
            kept_step: config.steps,
            final_loss,
        },
    };
    Ok(outcome)
}
