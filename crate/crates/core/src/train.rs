//! Training loop: gradient accumulation, deterministic shuffling, eval-split
//! early stopping with best-checkpoint restore, and a step/loss log.
//!
//! One optimizer step consumes `accum_steps` micro-batches of `micro_batch`
//! sequences. Gradients are summed per sequence and divided by the sequence
//! count of the whole window, so a 32-way accumulated step equals one big
//! batch over the same sequences.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedModel, NetGrads};
use crate::error::{Error, Result};
use crate::math::{Matrix, Real};
use crate::optim::{Adafactor, AdafactorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Micro-batches accumulated into one optimizer step.
    #[serde(default = "default_accum")]
    pub accum_steps: usize,
    /// Sequences per micro-batch.
    #[serde(default = "default_micro")]
    pub micro_batch: usize,
    /// Share of sequences held out for eval; 0 disables eval + early stop.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Optimizer steps between evals.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Consecutive non-improving evals tolerated before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// An eval must beat the best by this much to count as improvement.
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdafactorConfig,
}

fn default_epochs() -> usize {
    1
}
fn default_accum() -> usize {
    32
}
fn default_micro() -> usize {
    4
}
fn default_eval_fraction() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    10
}
fn default_patience() -> usize {
    5
}
fn default_min_delta() -> f64 {
    1e-3
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            accum_steps: default_accum(),
            micro_batch: default_micro(),
            eval_fraction: default_eval_fraction(),
            eval_every: default_eval_every(),
            patience: default_patience(),
            min_delta: default_min_delta(),
            seed: 0,
            optimizer: AdafactorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.accum_steps == 0 || self.micro_batch == 0 {
            return Err(Error::Config(
                "epochs, accum_steps and micro_batch must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must be in [0, 1)".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if self.min_delta < 0.0 {
            return Err(Error::Config("min_delta must be non-negative".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tsplit\tloss\n");
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.step, e.split.as_str(), e.loss);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("step\tsplit\tloss") => {}
            other => {
                return Err(Error::Parse {
                    path: "<train log>".into(),
                    message: format!("bad header {other:?}"),
                })
            }
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut f = line.split('\t');
            let err = |msg: &str| Error::Parse {
                path: "<train log>".into(),
                message: format!("line {}: {msg}", i + 2),
            };
            let step = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("bad step"))?;
            let split = match f.next() {
                Some("train") => Split::Train,
                Some("eval") => Split::Eval,
                _ => return Err(err("bad split")),
            };
            let loss = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("bad loss"))?;
            if f.next().is_some() {
                return Err(err("trailing fields"));
            }
            entries.push(TrainLogEntry { step, split, loss });
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Optimizer steps applied.
    pub steps: u64,
    /// Steps dropped because a gradient went non-finite.
    pub skipped_steps: u64,
    pub stopped_early: bool,
    pub best_eval: Option<f64>,
    /// Loss of the closing eval, before any best-checkpoint restore.
    pub final_eval: Option<f64>,
    /// True when the final weights were rolled back to the best eval
    /// checkpoint because the closing eval was worse.
    pub restored_best: bool,
}

/// Train in place. With any adapter attached only adapter tensors move; the
/// base stays frozen. Sequences are shuffled deterministically from
/// `config.seed`, and the eval split is carved off before the first epoch.
/// When an eval split exists, the trainable tensors are snapshotted at every
/// new best eval loss and restored at the end if later steps made things
/// worse, so the returned model is the best one seen, not the last one.
pub fn train<T: Real>(
    model: &mut AdaptedModel<T>,
    sequences: &[Vec<u32>],
    pad: Option<u32>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if sequences.is_empty() {
        return Err(Error::Train("no training sequences".into()));
    }
    let max_len = model.max_input_len();
    for (i, s) in sequences.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Train(format!(
                "sequence {i} has {} tokens; need at least 2",
                s.len()
            )));
        }
        if s.len() > max_len {
            return Err(Error::ContextOverflow {
                len: s.len(),
                context: max_len,
            });
        }
    }

    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut indices: Vec<usize> = (0..sequences.len()).collect();
    indices.shuffle(&mut split_rng);
    let n_eval = ((sequences.len() as f64) * config.eval_fraction).floor() as usize;
    let (eval_idx, train_idx) = indices.split_at(n_eval);
    let eval_idx = eval_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    if train_idx.is_empty() {
        return Err(Error::Train("eval split leaves no training data".into()));
    }

    let mut optimizer: Adafactor<T> = Adafactor::new(config.optimizer.clone())?;
    let mut log = TrainLog::default();
    let mut steps: u64 = 0;
    let mut skipped: u64 = 0;
    let mut best_eval: Option<f64> = None;
    let mut final_eval: Option<f64> = None;
    let mut stale_evals: usize = 0;
    let mut stopped_early = false;
    // Trainable tensors as of the best eval so far; restored at the end if
    // training ran past its best point.
    let mut best_snapshot: Option<(f64, Vec<(String, Matrix<T>)>)> = None;

    let window = config.accum_steps * config.micro_batch;

    'epochs: for epoch in 0..config.epochs {
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1 + epoch as u64));
        train_idx.shuffle(&mut epoch_rng);

        for chunk in train_idx.chunks(window) {
            let mut grads = NetGrads::zeros_for(model);
            let mut loss_sum = 0.0;
            for &i in chunk {
                let (loss, g) =
                    model.loss_and_grads(&sequences[i], pad, Some(&mut dropout_rng))?;
                grads.add_scaled(&g, T::one());
                loss_sum += loss.to_f64();
            }
            grads.scale_all(T::from_f64(1.0 / chunk.len() as f64));

            let grad_tensors = grads.trainable_tensors();
            let mut params = model.trainable_tensors_mut();
            let report = optimizer.step(&mut params, &grad_tensors)?;
            drop(params);
            if !report.applied {
                skipped += 1;
                continue;
            }
            steps = report.step;
            log.entries.push(TrainLogEntry {
                step: steps,
                split: Split::Train,
                loss: loss_sum / chunk.len() as f64,
            });

            if !eval_idx.is_empty() && steps % config.eval_every as u64 == 0 {
                let eval_loss = mean_eval_loss(model, sequences, &eval_idx, pad)?;
                log.entries.push(TrainLogEntry {
                    step: steps,
                    split: Split::Eval,
                    loss: eval_loss,
                });
                final_eval = Some(eval_loss);
                if best_snapshot.as_ref().map_or(true, |(l, _)| eval_loss < *l) {
                    let snap = model
                        .trainable_tensors_mut()
                        .into_iter()
                        .map(|(n, m)| (n, m.clone()))
                        .collect();
                    best_snapshot = Some((eval_loss, snap));
                }
                match best_eval {
                    Some(best) if eval_loss >= best - config.min_delta => {
                        stale_evals += 1;
                        if stale_evals >= config.patience {
                            stopped_early = true;
                            break 'epochs;
                        }
                    }
                    _ => {
                        if best_eval.is_none() || eval_loss < best_eval.unwrap() {
                            best_eval = Some(eval_loss);
                        }
                        stale_evals = 0;
                    }
                }
            }
        }
    }

    // Closing eval so the log always ends with the final quality.
    if !eval_idx.is_empty() {
        let eval_loss = mean_eval_loss(model, sequences, &eval_idx, pad)?;
        log.entries.push(TrainLogEntry {
            step: steps,
            split: Split::Eval,
            loss: eval_loss,
        });
        final_eval = Some(eval_loss);
        if best_eval.is_none() || eval_loss < best_eval.unwrap() {
            best_eval = Some(eval_loss);
        }
    }

    // Leave the model at its best observed eval, not wherever the last
    // optimizer step happened to land.
    let mut restored_best = false;
    if let Some((snap_loss, snap)) = best_snapshot {
        if final_eval.is_some_and(|f| snap_loss < f) {
            let mut params = model.trainable_tensors_mut();
            for ((name, param), (snap_name, saved)) in params.iter_mut().zip(snap.iter()) {
                debug_assert_eq!(*name, *snap_name);
                **param = saved.clone();
            }
            restored_best = true;
        }
    }

    Ok(TrainOutcome {
        log,
        steps,
        skipped_steps: skipped,
        stopped_early,
        restored_best,
        best_eval,
        final_eval,
    })
}

fn mean_eval_loss<T: Real>(
    model: &AdaptedModel<T>,
    sequences: &[Vec<u32>],
    idx: &[usize],
    pad: Option<u32>,
) -> Result<f64> {
    let mut sum = 0.0;
    for &i in idx {
        sum += model.sequence_nll(&sequences[i], pad)?.to_f64();
    }
    Ok(sum / idx.len() as f64)
}
