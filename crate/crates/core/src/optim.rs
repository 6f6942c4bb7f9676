//! Adafactor optimizer with factored second moments.
//!
//! Matrices (both dims > 1) track one row vector and one column vector of
//! second-moment statistics instead of a full matrix, so optimizer memory for
//! an n x m weight is n + m. True vectors fall back to full second moments.
//! Defaults follow the published recipe: decay 1 - t^-0.8, update clipping at
//! threshold 1.0, relative step min(1e-2, 1/sqrt(t)) scaled by max(eps2,
//! RMS(X)). Momentum and weight decay exist behind flags and default off.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdafactorConfig {
    /// Scale steps by max(eps2, RMS(X)) * min(1e-2, 1/sqrt(t)). When false,
    /// `lr` is used as a fixed step size.
    #[serde(default = "default_true")]
    pub relative_step: bool,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub decay_exponent: f64,
    #[serde(default = "default_clip")]
    pub clip_threshold: f64,
    #[serde(default = "default_eps1")]
    pub eps1: f64,
    #[serde(default = "default_eps2")]
    pub eps2: f64,
    /// First-moment decay; `None` disables momentum entirely.
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_true() -> bool {
    true
}
fn default_lr() -> f64 {
    0.01
}
fn default_decay() -> f64 {
    0.8
}
fn default_clip() -> f64 {
    1.0
}
fn default_eps1() -> f64 {
    1e-30
}
fn default_eps2() -> f64 {
    1e-3
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            relative_step: true,
            lr: default_lr(),
            decay_exponent: default_decay(),
            clip_threshold: default_clip(),
            eps1: default_eps1(),
            eps2: default_eps2(),
            beta1: None,
            weight_decay: 0.0,
        }
    }
}

impl AdafactorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.relative_step && !(self.lr > 0.0) {
            return Err(Error::Config("fixed lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.decay_exponent) {
            return Err(Error::Config("decay_exponent must be in (0, 1)".into()));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::Config("clip_threshold must be positive".into()));
        }
        if let Some(b) = self.beta1 {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config("beta1 must be in [0, 1)".into()));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

enum SecondMoment<T> {
    /// Row and column sums of the squared-gradient EMA.
    Factored { row: Vec<T>, col: Vec<T> },
    Full(Vec<T>),
}

struct TensorState<T> {
    name: String,
    rows: usize,
    cols: usize,
    second: SecondMoment<T>,
    momentum: Option<Vec<T>>,
}

/// One optimizer step's outcome.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    /// False when a non-finite gradient made the step a no-op.
    pub applied: bool,
    /// Steps applied so far, including this one if it applied.
    pub step: u64,
}

pub struct Adafactor<T> {
    config: AdafactorConfig,
    states: Vec<TensorState<T>>,
    step: u64,
}

impl<T: Real> Adafactor<T> {
    pub fn new(config: AdafactorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: Vec::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &AdafactorConfig {
        &self.config
    }

    pub fn steps_applied(&self) -> u64 {
        self.step
    }

    /// Optimizer memory in scalar slots (second moments plus momentum).
    pub fn state_len(&self) -> usize {
        self.states
            .iter()
            .map(|s| {
                let second = match &s.second {
                    SecondMoment::Factored { row, col } => row.len() + col.len(),
                    SecondMoment::Full(v) => v.len(),
                };
                second + s.momentum.as_ref().map_or(0, Vec::len)
            })
            .sum()
    }

    fn bind(&mut self, params: &[(String, &mut Matrix<T>)]) -> Result<()> {
        if self.states.is_empty() {
            self.states = params
                .iter()
                .map(|(name, m)| {
                    let factored = m.rows() > 1 && m.cols() > 1;
                    TensorState {
                        name: name.clone(),
                        rows: m.rows(),
                        cols: m.cols(),
                        second: if factored {
                            SecondMoment::Factored {
                                row: vec![T::zero(); m.rows()],
                                col: vec![T::zero(); m.cols()],
                            }
                        } else {
                            SecondMoment::Full(vec![T::zero(); m.len()])
                        },
                        momentum: self.config.beta1.map(|_| vec![T::zero(); m.len()]),
                    }
                })
                .collect();
            return Ok(());
        }
        if self.states.len() != params.len() {
            return Err(Error::Train(format!(
                "optimizer bound to {} tensors, got {}",
                self.states.len(),
                params.len()
            )));
        }
        for (s, (name, m)) in self.states.iter().zip(params) {
            if s.name != *name || s.rows != m.rows() || s.cols != m.cols() {
                return Err(Error::Train(format!(
                    "optimizer state mismatch at {name:?} ({}x{})",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(())
    }

    /// Apply one update. `params` and `grads` must align pairwise by name.
    /// A non-finite gradient anywhere skips the whole step and leaves both
    /// parameters and optimizer state untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Matrix<T>)],
        grads: &[(String, &Matrix<T>)],
    ) -> Result<StepReport> {
        self.bind(params)?;
        if params.len() != grads.len() {
            return Err(Error::Train(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        for ((pn, p), (gn, g)) in params.iter().zip(grads) {
            if pn != gn {
                return Err(Error::Train(format!(
                    "parameter {pn:?} paired with gradient {gn:?}"
                )));
            }
            if p.rows() != g.rows() || p.cols() != g.cols() {
                return Err(Error::Train(format!("shape mismatch at {pn:?}")));
            }
        }
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            return Ok(StepReport {
                applied: false,
                step: self.step,
            });
        }

        let t = self.step + 1;
        let cfg = &self.config;
        // beta2_hat = 1 - t^(-decay)
        let beta2 = T::from_f64(1.0 - (t as f64).powf(-cfg.decay_exponent));
        let one = T::one();
        let eps1 = T::from_f64(cfg.eps1);
        let clip = T::from_f64(cfg.clip_threshold);

        for (state, ((_, param), (_, grad))) in
            self.states.iter_mut().zip(params.iter_mut().zip(grads))
        {
            let n = state.rows;
            let m = state.cols;
            let g = grad.as_slice();

            // Update second moments and form the preconditioned update U.
            let mut update: Vec<T> = vec![T::zero(); g.len()];
            match &mut state.second {
                SecondMoment::Factored { row, col } => {
                    for i in 0..n {
                        let mut sum = T::zero();
                        for j in 0..m {
                            let v = g[i * m + j];
                            sum += v * v + eps1;
                        }
                        row[i] = beta2 * row[i] + (one - beta2) * sum;
                    }
                    for j in 0..m {
                        let mut sum = T::zero();
                        for i in 0..n {
                            let v = g[i * m + j];
                            sum += v * v + eps1;
                        }
                        col[j] = beta2 * col[j] + (one - beta2) * sum;
                    }
                    let mut row_total = T::zero();
                    for &r in row.iter() {
                        row_total += r;
                    }
                    // v_ij = row_i * col_j / sum(row); U = G / sqrt(V)
                    for i in 0..n {
                        let ri = row[i] / row_total;
                        for j in 0..m {
                            let v = ri * col[j];
                            update[i * m + j] = g[i * m + j] / v.sqrt();
                        }
                    }
                }
                SecondMoment::Full(v2) => {
                    for (k, v) in v2.iter_mut().enumerate() {
                        let gg = g[k] * g[k] + eps1;
                        *v = beta2 * *v + (one - beta2) * gg;
                        update[k] = g[k] / v.sqrt();
                    }
                }
            }

            // RMS clipping of the update.
            let mut sum_sq = T::zero();
            for &u in &update {
                sum_sq += u * u;
            }
            let rms_u = (sum_sq / T::from_f64(update.len() as f64)).sqrt();
            let denom = (rms_u / clip).max(one);
            for u in &mut update {
                *u = *u / denom;
            }

            if let (Some(mom), Some(b1)) = (&mut state.momentum, cfg.beta1) {
                let b1 = T::from_f64(b1);
                for (mk, u) in mom.iter_mut().zip(&mut update) {
                    *mk = b1 * *mk + (one - b1) * *u;
                    *u = *mk;
                }
            }

            // Step size.
            let alpha = if cfg.relative_step {
                let rho = (1.0 / (t as f64).sqrt()).min(1e-2);
                let scale = param.rms().to_f64().max(cfg.eps2);
                T::from_f64(scale * rho)
            } else {
                T::from_f64(cfg.lr)
            };

            let p = param.as_mut_slice();
            if cfg.weight_decay > 0.0 {
                let wd = T::from_f64(cfg.weight_decay);
                for v in p.iter_mut() {
                    *v -= alpha * wd * *v;
                }
            }
            for (v, u) in p.iter_mut().zip(&update) {
                *v -= alpha * *u;
            }
        }

        self.step = t;
        Ok(StepReport {
            applied: true,
            step: t,
        })
    }
}
