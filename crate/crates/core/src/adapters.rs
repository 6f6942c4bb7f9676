//! Parameter-efficient adapters: low-rank deltas on linear projections and
//! trained virtual-token prefixes.
//!
//! Both adapter kinds leave the wrapped base model frozen. Attaching is
//! reversible (detach restores the exact base weights); merging folds a
//! low-rank adapter into the base weights and removes it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, Real};
use crate::model::{LmConfig, ModelState, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargetKind {
    Wq,
    Wk,
    Wv,
    Wo,
    MlpIn,
    MlpOut,
}

impl LoraTargetKind {
    pub const ALL: [LoraTargetKind; 6] = [
        LoraTargetKind::Wq,
        LoraTargetKind::Wk,
        LoraTargetKind::Wv,
        LoraTargetKind::Wo,
        LoraTargetKind::MlpIn,
        LoraTargetKind::MlpOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTargetKind::Wq => "wq",
            LoraTargetKind::Wk => "wk",
            LoraTargetKind::Wv => "wv",
            LoraTargetKind::Wo => "wo",
            LoraTargetKind::MlpIn => "mlp_in",
            LoraTargetKind::MlpOut => "mlp_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown lora target {s:?}")))
    }

    /// (d_in, d_out) of the wrapped projection.
    fn dims(self, config: &LmConfig) -> (usize, usize) {
        let d = config.embed_dim;
        match self {
            LoraTargetKind::MlpIn => (d, config.mlp_dim()),
            LoraTargetKind::MlpOut => (config.mlp_dim(), d),
            _ => (d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<LoraTargetKind>,
    #[serde(default)]
    pub seed: u64,
}

fn default_rank() -> usize {
    8
}
fn default_alpha() -> f64 {
    16.0
}
fn default_dropout() -> f64 {
    0.1
}
fn default_targets() -> Vec<LoraTargetKind> {
    vec![LoraTargetKind::Wq, LoraTargetKind::Wv]
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            alpha: default_alpha(),
            dropout: default_dropout(),
            targets: default_targets(),
            seed: 0,
        }
    }
}

impl LoraConfig {
    /// Delta is applied as `scale * B*A` with `scale = alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &LmConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("lora alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "lora dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora targets must be non-empty".into()));
        }
        for &t in &self.targets {
            let (d_in, d_out) = t.dims(model);
            if self.rank > d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "lora rank {} exceeds {} projection dims {}x{}",
                    self.rank,
                    t.as_str(),
                    d_out,
                    d_in
                )));
            }
        }
        Ok(())
    }

    /// Targets in a fixed order, deduplicated; init and tensor naming depend
    /// on this order being stable.
    fn normalized_targets(&self) -> Vec<LoraTargetKind> {
        let mut t = self.targets.clone();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// One low-rank pair: `a` is rank x d_in, `b` is d_out x rank.
#[derive(Debug, Clone)]
pub struct LoraTarget<T> {
    pub kind: LoraTargetKind,
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct LoraAdapter<T> {
    pub config: LoraConfig,
    /// Outer index = layer, inner = targets in normalized order.
    pub layers: Vec<Vec<LoraTarget<T>>>,
}

impl<T: Real> LoraAdapter<T> {
    /// A from N(0, 0.02^2), B zero, so the initial delta is exactly zero.
    pub fn init(config: LoraConfig, model: &LmConfig) -> Result<Self> {
        config.validate(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let targets = config.normalized_targets();
        let layers = (0..model.num_layers)
            .map(|_| {
                targets
                    .iter()
                    .map(|&kind| {
                        let (d_in, d_out) = kind.dims(model);
                        LoraTarget {
                            kind,
                            a: Matrix::normal(config.rank, d_in, INIT_STD, &mut rng),
                            b: Matrix::zeros(d_out, config.rank),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|ts| {
                    ts.iter()
                        .map(|t| LoraTarget {
                            kind: t.kind,
                            a: Matrix::zeros(t.a.rows(), t.a.cols()),
                            b: Matrix::zeros(t.b.rows(), t.b.cols()),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn target(&self, layer: usize, kind: LoraTargetKind) -> Option<&LoraTarget<T>> {
        self.layers[layer].iter().find(|t| t.kind == kind)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for (i, ts) in self.layers.iter().enumerate() {
            for t in ts {
                out.push((format!("lora.layer{i}.{}.a", t.kind.as_str()), &t.a));
                out.push((format!("lora.layer{i}.{}.b", t.kind.as_str()), &t.b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        for (i, ts) in self.layers.iter_mut().enumerate() {
            for t in ts {
                out.push((format!("lora.layer{i}.{}.a", t.kind.as_str()), &mut t.a));
                out.push((format!("lora.layer{i}.{}.b", t.kind.as_str()), &mut t.b));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let theirs = other.named_tensors();
        for ((_, mine), (_, that)) in self.named_tensors_mut().into_iter().zip(theirs) {
            mine.add_scaled(that, scale);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.all_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftPromptInit {
    /// N(0, 0.02^2) like other weights.
    Normal,
    /// Copy embedding rows of tokens sampled uniformly from the vocabulary.
    FromVocab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftPromptConfig {
    #[serde(default = "default_virtual_tokens")]
    pub virtual_tokens: usize,
    #[serde(default = "default_sp_init")]
    pub init: SoftPromptInit,
    #[serde(default)]
    pub seed: u64,
}

fn default_virtual_tokens() -> usize {
    10
}
fn default_sp_init() -> SoftPromptInit {
    SoftPromptInit::Normal
}

impl Default for SoftPromptConfig {
    fn default() -> Self {
        Self {
            virtual_tokens: default_virtual_tokens(),
            init: default_sp_init(),
            seed: 0,
        }
    }
}

impl SoftPromptConfig {
    pub fn validate(&self, model: &LmConfig) -> Result<()> {
        if self.virtual_tokens == 0 {
            return Err(Error::Config("virtual_tokens must be positive".into()));
        }
        if self.virtual_tokens + 2 > model.context_len {
            return Err(Error::Config(format!(
                "{} virtual tokens leave no room for real tokens in context {}",
                self.virtual_tokens, model.context_len
            )));
        }
        Ok(())
    }
}

/// Trained embeddings prepended before every input sequence. Real token
/// positions shift right by `virtual_tokens`.
#[derive(Debug, Clone)]
pub struct SoftPrompt<T> {
    pub config: SoftPromptConfig,
    /// virtual_tokens x embed_dim.
    pub embeddings: Matrix<T>,
}

impl<T: Real> SoftPrompt<T> {
    pub fn init(config: SoftPromptConfig, model: &ModelState<T>) -> Result<Self> {
        config.validate(&model.config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.virtual_tokens;
        let d = model.config.embed_dim;
        let embeddings = match config.init {
            SoftPromptInit::Normal => Matrix::normal(k, d, INIT_STD, &mut rng),
            SoftPromptInit::FromVocab => {
                use rand::Rng;
                let mut m = Matrix::zeros(k, d);
                for i in 0..k {
                    let tok = rng.gen_range(0..model.config.vocab_size);
                    m.row_mut(i).copy_from_slice(model.tok_emb.row(tok));
                }
                m
            }
        };
        Ok(Self { config, embeddings })
    }

    pub fn len(&self) -> usize {
        self.config.virtual_tokens
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_params(&self) -> usize {
        self.embeddings.len()
    }
}

/// A base model with optional adapters attached. While any adapter is
/// attached, the base weights are frozen: the training loop only sees adapter
/// tensors as trainable.
#[derive(Debug, Clone)]
pub struct AdaptedModel<T> {
    base: ModelState<T>,
    lora: Option<LoraAdapter<T>>,
    soft_prompt: Option<SoftPrompt<T>>,
}

impl<T: Real> AdaptedModel<T> {
    pub fn new(base: ModelState<T>) -> Self {
        Self {
            base,
            lora: None,
            soft_prompt: None,
        }
    }

    pub fn base(&self) -> &ModelState<T> {
        &self.base
    }

    pub fn lora(&self) -> Option<&LoraAdapter<T>> {
        self.lora.as_ref()
    }

    pub fn soft_prompt(&self) -> Option<&SoftPrompt<T>> {
        self.soft_prompt.as_ref()
    }

    pub fn config(&self) -> &LmConfig {
        &self.base.config
    }

    pub fn has_adapter(&self) -> bool {
        self.lora.is_some() || self.soft_prompt.is_some()
    }

    /// Longest real-token input this model accepts in one forward pass.
    pub fn max_input_len(&self) -> usize {
        let k = self.soft_prompt.as_ref().map_or(0, SoftPrompt::len);
        self.base.config.context_len - k
    }

    pub fn attach_lora(&mut self, config: LoraConfig) -> Result<()> {
        let adapter = LoraAdapter::init(config, &self.base.config)?;
        self.attach_lora_state(adapter)
    }

    pub fn attach_lora_state(&mut self, adapter: LoraAdapter<T>) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::AdapterAttached("lora".into()));
        }
        adapter.config.validate(&self.base.config)?;
        if adapter.layers.len() != self.base.config.num_layers {
            return Err(Error::Shape(format!(
                "lora adapter covers {} layers, model has {}",
                adapter.layers.len(),
                self.base.config.num_layers
            )));
        }
        self.lora = Some(adapter);
        Ok(())
    }

    pub fn detach_lora(&mut self) -> Result<LoraAdapter<T>> {
        self.lora.take().ok_or_else(|| Error::NoAdapter("lora".into()))
    }

    /// Fold `scale * B*A` into each wrapped projection and drop the adapter.
    pub fn merge_lora(&mut self) -> Result<()> {
        let adapter = self.lora.take().ok_or_else(|| Error::NoAdapter("lora".into()))?;
        let scale = T::from_f64(adapter.config.scale());
        for (layer, targets) in self.base.layers.iter_mut().zip(&adapter.layers) {
            for t in targets {
                let delta = Matrix::matmul_nn(&t.b, &t.a);
                let w = match t.kind {
                    LoraTargetKind::Wq => &mut layer.wq,
                    LoraTargetKind::Wk => &mut layer.wk,
                    LoraTargetKind::Wv => &mut layer.wv,
                    LoraTargetKind::Wo => &mut layer.wo,
                    LoraTargetKind::MlpIn => &mut layer.mlp_in,
                    LoraTargetKind::MlpOut => &mut layer.mlp_out,
                };
                w.add_scaled(&delta, scale);
            }
        }
        Ok(())
    }

    pub fn attach_soft_prompt(&mut self, config: SoftPromptConfig) -> Result<()> {
        let sp = SoftPrompt::init(config, &self.base)?;
        self.attach_soft_prompt_state(sp)
    }

    pub fn attach_soft_prompt_state(&mut self, sp: SoftPrompt<T>) -> Result<()> {
        if self.soft_prompt.is_some() {
            return Err(Error::AdapterAttached("soft prompt".into()));
        }
        sp.config.validate(&self.base.config)?;
        if sp.embeddings.rows() != sp.config.virtual_tokens
            || sp.embeddings.cols() != self.base.config.embed_dim
        {
            return Err(Error::Shape(format!(
                "soft prompt embeddings are {}x{}, expected {}x{}",
                sp.embeddings.rows(),
                sp.embeddings.cols(),
                sp.config.virtual_tokens,
                self.base.config.embed_dim
            )));
        }
        self.soft_prompt = Some(sp);
        Ok(())
    }

    pub fn detach_soft_prompt(&mut self) -> Result<SoftPrompt<T>> {
        self.soft_prompt
            .take()
            .ok_or_else(|| Error::NoAdapter("soft prompt".into()))
    }

    pub fn into_base(self) -> ModelState<T> {
        self.base
    }

    pub fn num_params(&self) -> usize {
        self.base.num_params()
            + self.lora.as_ref().map_or(0, LoraAdapter::num_params)
            + self.soft_prompt.as_ref().map_or(0, SoftPrompt::num_params)
    }

    pub fn num_trainable(&self) -> usize {
        if self.has_adapter() {
            self.lora.as_ref().map_or(0, LoraAdapter::num_params)
                + self.soft_prompt.as_ref().map_or(0, SoftPrompt::num_params)
        } else {
            self.base.num_params()
        }
    }

    /// Trainable share of all parameters. Requires an attached adapter;
    /// without one the notion is vacuous (everything is trainable).
    pub fn trainable_fraction(&self) -> Result<f64> {
        if !self.has_adapter() {
            return Err(Error::NoAdapter("any".into()));
        }
        Ok(self.num_trainable() as f64 / self.num_params() as f64)
    }

    /// All tensors, base first, then adapters; order matches `NetGrads`.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = self.base.named_tensors();
        if let Some(l) = &self.lora {
            out.extend(l.named_tensors());
        }
        if let Some(sp) = &self.soft_prompt {
            out.push(("soft_prompt.emb".into(), &sp.embeddings));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = self.base.named_tensors_mut();
        if let Some(l) = &mut self.lora {
            out.extend(l.named_tensors_mut());
        }
        if let Some(sp) = &mut self.soft_prompt {
            out.push(("soft_prompt.emb".into(), &mut sp.embeddings));
        }
        out
    }

    /// Tensors the optimizer may update: adapter tensors when any adapter is
    /// attached, otherwise the full base model.
    pub fn trainable_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        if self.has_adapter() {
            let mut out = Vec::new();
            if let Some(l) = &mut self.lora {
                out.extend(l.named_tensors_mut());
            }
            if let Some(sp) = &mut self.soft_prompt {
                out.push(("soft_prompt.emb".into(), &mut sp.embeddings));
            }
            out
        } else {
            self.base.named_tensors_mut()
        }
    }
}

/// Gradients for an `AdaptedModel`, shape-aligned with its tensors.
#[derive(Debug, Clone)]
pub struct NetGrads<T> {
    pub base: ModelState<T>,
    pub lora: Option<LoraAdapter<T>>,
    pub soft_prompt: Option<Matrix<T>>,
}

impl<T: Real> NetGrads<T> {
    pub fn zeros_for(model: &AdaptedModel<T>) -> Self {
        Self {
            base: model.base.zeros_like(),
            lora: model.lora.as_ref().map(LoraAdapter::zeros_like),
            soft_prompt: model
                .soft_prompt
                .as_ref()
                .map(|sp| Matrix::zeros(sp.embeddings.rows(), sp.embeddings.cols())),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = self.base.named_tensors();
        if let Some(l) = &self.lora {
            out.extend(l.named_tensors());
        }
        if let Some(sp) = &self.soft_prompt {
            out.push(("soft_prompt.emb".into(), sp));
        }
        out
    }

    /// Gradient tensors matching `AdaptedModel::trainable_tensors_mut`.
    pub fn trainable_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        if self.lora.is_some() || self.soft_prompt.is_some() {
            let mut out = Vec::new();
            if let Some(l) = &self.lora {
                out.extend(l.named_tensors());
            }
            if let Some(sp) = &self.soft_prompt {
                out.push(("soft_prompt.emb".into(), sp));
            }
            out
        } else {
            self.base.named_tensors()
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        self.base.add_scaled(&other.base, scale);
        if let (Some(a), Some(b)) = (&mut self.lora, &other.lora) {
            a.add_scaled(b, scale);
        }
        if let (Some(a), Some(b)) = (&mut self.soft_prompt, &other.soft_prompt) {
            a.add_scaled(b, scale);
        }
    }

    pub fn scale_all(&mut self, factor: T) {
        self.base.scale_all(factor);
        if let Some(l) = &mut self.lora {
            for (_, m) in l.named_tensors_mut() {
                m.scale(factor);
            }
        }
        if let Some(sp) = &mut self.soft_prompt {
            sp.scale(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Precision;

    fn model() -> ModelState<f64> {
        ModelState::init(LmConfig {
            vocab_size: 13,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            context_len: 16,
            seed: 3,
            precision: Precision::F64,
            tie_embeddings: true,
        })
        .unwrap()
    }

    fn lora_cfg() -> LoraConfig {
        LoraConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.0,
            targets: vec![LoraTargetKind::Wv, LoraTargetKind::Wq],
            seed: 11,
        }
    }

    #[test]
    fn scale_is_alpha_over_rank() {
        assert_eq!(LoraConfig::default().scale(), 2.0);
        assert_eq!(lora_cfg().scale(), 2.0);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let m = model().config;
        let mut c = lora_cfg();
        c.rank = 0;
        assert!(c.validate(&m).is_err());
        let mut c = lora_cfg();
        c.dropout = 1.0;
        assert!(c.validate(&m).is_err());
        let mut c = lora_cfg();
        c.targets.clear();
        assert!(c.validate(&m).is_err());
        let mut c = lora_cfg();
        c.rank = 9; // > embed_dim 8
        assert!(c.validate(&m).is_err());
    }

    #[test]
    fn init_zeroes_b_and_orders_targets() {
        let adapter: LoraAdapter<f64> = LoraAdapter::init(lora_cfg(), &model().config).unwrap();
        assert_eq!(adapter.layers.len(), 2);
        let kinds: Vec<_> = adapter.layers[0].iter().map(|t| t.kind).collect();
        assert_eq!(kinds, vec![LoraTargetKind::Wq, LoraTargetKind::Wv]);
        for ts in &adapter.layers {
            for t in ts {
                assert!(t.b.as_slice().iter().all(|&x| x == 0.0));
                assert!(t.a.as_slice().iter().any(|&x| x != 0.0));
                assert_eq!(t.a.rows(), 2);
                assert_eq!(t.a.cols(), 8);
                assert_eq!(t.b.rows(), 8);
            }
        }
    }

    #[test]
    fn attach_detach_restores_base_bitwise() {
        let base = model();
        let snapshot = base.clone();
        let mut am = AdaptedModel::new(base);
        am.attach_lora(lora_cfg()).unwrap();
        assert!(am.has_adapter());
        let adapter = am.detach_lora().unwrap();
        assert_eq!(adapter.num_params(), 2 * 2 * (2 * 8 + 8 * 2));
        assert!(!am.has_adapter());
        assert!(am.base().bits_eq(&snapshot));
    }

    #[test]
    fn double_attach_and_double_merge_fail() {
        let mut am = AdaptedModel::new(model());
        am.attach_lora(lora_cfg()).unwrap();
        assert!(matches!(
            am.attach_lora(lora_cfg()),
            Err(Error::AdapterAttached(_))
        ));
        am.merge_lora().unwrap();
        assert!(matches!(am.merge_lora(), Err(Error::NoAdapter(_))));
        assert!(matches!(am.detach_lora(), Err(Error::NoAdapter(_))));
    }

    #[test]
    fn merge_with_zero_b_keeps_base_bitwise() {
        let base = model();
        let snapshot = base.clone();
        let mut am = AdaptedModel::new(base);
        am.attach_lora(lora_cfg()).unwrap();
        am.merge_lora().unwrap();
        assert!(am.base().bits_eq(&snapshot));
    }

    #[test]
    fn merge_applies_scaled_product() {
        let mut am = AdaptedModel::new(model());
        let before = am.base().layers[0].wq.clone();
        am.attach_lora(lora_cfg()).unwrap();
        // Hand-set B so the delta is non-zero and predictable.
        let am2 = {
            let mut clone = am.clone();
            if let Some(l) = &mut clone.lora {
                for ts in &mut l.layers {
                    for t in ts.iter_mut() {
                        t.b.fill(1.0);
                    }
                }
            }
            clone
        };
        let a = am2.lora().unwrap().target(0, LoraTargetKind::Wq).unwrap().a.clone();
        let mut expected = before.clone();
        let mut col_sums = vec![0.0; 8];
        for (j, s) in col_sums.iter_mut().enumerate() {
            for r in 0..2 {
                *s += a.get(r, j);
            }
        }
        for i in 0..8 {
            for j in 0..8 {
                expected.set(i, j, expected.get(i, j) + 2.0 * col_sums[j]);
            }
        }
        let mut am2 = am2;
        am2.merge_lora().unwrap();
        let merged = &am2.base().layers[0].wq;
        for i in 0..8 {
            for j in 0..8 {
                assert!((merged.get(i, j) - expected.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_prompt_validation_and_shapes() {
        let m = model();
        let cfg = SoftPromptConfig {
            virtual_tokens: 4,
            init: SoftPromptInit::Normal,
            seed: 5,
        };
        let sp: SoftPrompt<f64> = SoftPrompt::init(cfg, &m).unwrap();
        assert_eq!(sp.embeddings.rows(), 4);
        assert_eq!(sp.embeddings.cols(), 8);

        let too_big = SoftPromptConfig {
            virtual_tokens: 15, // context 16 leaves <2 real slots
            init: SoftPromptInit::Normal,
            seed: 0,
        };
        assert!(SoftPrompt::init(too_big, &m).is_err());
    }

    #[test]
    fn from_vocab_init_copies_embedding_rows() {
        let m = model();
        let cfg = SoftPromptConfig {
            virtual_tokens: 3,
            init: SoftPromptInit::FromVocab,
            seed: 9,
        };
        let sp: SoftPrompt<f64> = SoftPrompt::init(cfg, &m).unwrap();
        for i in 0..3 {
            let row = sp.embeddings.row(i);
            let found = (0..m.config.vocab_size).any(|t| m.tok_emb.row(t) == row);
            assert!(found, "virtual row {i} is not an embedding row");
        }
    }

    #[test]
    fn trainable_fraction_needs_adapter() {
        let mut am = AdaptedModel::new(model());
        assert!(am.trainable_fraction().is_err());
        am.attach_lora(lora_cfg()).unwrap();
        let f = am.trainable_fraction().unwrap();
        let adapter_params = 2 * 2 * (2 * 8 + 8 * 2);
        let expected = adapter_params as f64 / am.num_params() as f64;
        assert!((f - expected).abs() < 1e-15);
        assert!(f < 0.2, "adapter should be a small fraction, got {f}");
        assert_eq!(am.num_trainable(), adapter_params);
    }

    #[test]
    fn max_input_len_accounts_for_virtual_tokens() {
        let mut am = AdaptedModel::new(model());
        assert_eq!(am.max_input_len(), 16);
        am.attach_soft_prompt(SoftPromptConfig {
            virtual_tokens: 4,
            init: SoftPromptInit::Normal,
            seed: 0,
        })
        .unwrap();
        assert_eq!(am.max_input_len(), 12);
    }

    #[test]
    fn grads_align_with_trainable_set() {
        let mut am = AdaptedModel::new(model());
        am.attach_lora(lora_cfg()).unwrap();
        let grads = NetGrads::zeros_for(&am);
        let names_g: Vec<String> = grads.trainable_tensors().into_iter().map(|(n, _)| n).collect();
        let names_m: Vec<String> = am
            .trainable_tensors_mut()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names_g, names_m);
        assert!(names_m.iter().all(|n| n.starts_with("lora.")));
    }
}
