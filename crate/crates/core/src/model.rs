//! Decoder-only transformer parameters.
//!
//! The architecture is deliberately small: learned token + position
//! embeddings, pre-norm blocks (causal multi-head attention, then a GELU MLP),
//! a final layer norm, and a linear vocabulary head that can be tied to the
//! token embedding. Attention projections carry no bias terms; only the MLP
//! linears do.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Dtype, Matrix, Real};

/// Standard deviation for weight init; layer norms start at identity.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_context_len")]
    pub context_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
}

fn default_embed_dim() -> usize {
    64
}
fn default_num_layers() -> usize {
    2
}
fn default_num_heads() -> usize {
    4
}
fn default_context_len() -> usize {
    64
}
fn default_precision() -> Precision {
    Precision::F32
}
fn default_tie() -> bool {
    true
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "embed_dim, num_heads and num_layers must be positive".into(),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gain: Matrix<T>,
    pub offset: Matrix<T>,
}

impl<T: Real> LayerNormParams<T> {
    fn identity(dim: usize) -> Self {
        Self {
            gain: Matrix::filled(1, dim, T::one()),
            offset: Matrix::zeros(1, dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gain: Matrix::zeros(1, dim),
            offset: Matrix::zeros(1, dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub ln1: LayerNormParams<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp_in: Matrix<T>,
    pub mlp_in_bias: Matrix<T>,
    pub mlp_out: Matrix<T>,
    pub mlp_out_bias: Matrix<T>,
}

/// Full parameter set. Also doubles as the gradient container: gradients for
/// a model are just a zero-initialized clone of the same shape.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: LmConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub ln_f: LayerNormParams<T>,
    /// `None` when the output head shares the token embedding.
    pub head: Option<Matrix<T>>,
}

impl<T: Real> ModelState<T> {
    /// Fresh parameters: weights from N(0, 0.02^2) drawn from a ChaCha stream
    /// seeded with `config.seed`, norm gains 1, all biases and offsets 0.
    pub fn init(config: LmConfig) -> Result<Self> {
        config.validate()?;
        if config.precision.dtype() != T::DTYPE {
            return Err(Error::Config(format!(
                "config precision {:?} does not match element type {:?}",
                config.precision.dtype(),
                T::DTYPE
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let m = config.mlp_dim();
        let tok_emb = Matrix::normal(config.vocab_size, d, INIT_STD, &mut rng);
        let pos_emb = Matrix::normal(config.context_len, d, INIT_STD, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1: LayerNormParams::identity(d),
                wq: Matrix::normal(d, d, INIT_STD, &mut rng),
                wk: Matrix::normal(d, d, INIT_STD, &mut rng),
                wv: Matrix::normal(d, d, INIT_STD, &mut rng),
                wo: Matrix::normal(d, d, INIT_STD, &mut rng),
                ln2: LayerNormParams::identity(d),
                mlp_in: Matrix::normal(m, d, INIT_STD, &mut rng),
                mlp_in_bias: Matrix::zeros(1, m),
                mlp_out: Matrix::normal(d, m, INIT_STD, &mut rng),
                mlp_out_bias: Matrix::zeros(1, d),
            })
            .collect();
        let ln_f = LayerNormParams::identity(d);
        let head = if config.tie_embeddings {
            None
        } else {
            Some(Matrix::normal(config.vocab_size, d, INIT_STD, &mut rng))
        };
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            head,
        })
    }

    /// Every tensor zero, shapes from the config. Gradient accumulators and
    /// checkpoint loading start from this.
    pub fn zeros(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let m = config.mlp_dim();
        let head = if config.tie_embeddings {
            None
        } else {
            Some(Matrix::zeros(config.vocab_size, d))
        };
        Ok(Self {
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.context_len, d),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    ln1: LayerNormParams::zeros(d),
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    ln2: LayerNormParams::zeros(d),
                    mlp_in: Matrix::zeros(m, d),
                    mlp_in_bias: Matrix::zeros(1, m),
                    mlp_out: Matrix::zeros(d, m),
                    mlp_out_bias: Matrix::zeros(1, d),
                })
                .collect(),
            ln_f: LayerNormParams::zeros(d),
            head,
            config,
        })
    }

    /// Same shapes as `self`, every element zero.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("existing config revalidates")
    }

    /// The matrix used by the output projection (the embedding when tied).
    pub fn head_matrix(&self) -> &Matrix<T> {
        self.head.as_ref().unwrap_or(&self.tok_emb)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &l.ln1.gain));
            out.push((format!("layer{i}.ln1.offset"), &l.ln1.offset));
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.ln2.gain"), &l.ln2.gain));
            out.push((format!("layer{i}.ln2.offset"), &l.ln2.offset));
            out.push((format!("layer{i}.mlp_in"), &l.mlp_in));
            out.push((format!("layer{i}.mlp_in_bias"), &l.mlp_in_bias));
            out.push((format!("layer{i}.mlp_out"), &l.mlp_out));
            out.push((format!("layer{i}.mlp_out_bias"), &l.mlp_out_bias));
        }
        out.push(("ln_f.gain".into(), &self.ln_f.gain));
        out.push(("ln_f.offset".into(), &self.ln_f.offset));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out: Vec<(String, &mut Matrix<T>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &mut l.ln1.gain));
            out.push((format!("layer{i}.ln1.offset"), &mut l.ln1.offset));
            out.push((format!("layer{i}.wq"), &mut l.wq));
            out.push((format!("layer{i}.wk"), &mut l.wk));
            out.push((format!("layer{i}.wv"), &mut l.wv));
            out.push((format!("layer{i}.wo"), &mut l.wo));
            out.push((format!("layer{i}.ln2.gain"), &mut l.ln2.gain));
            out.push((format!("layer{i}.ln2.offset"), &mut l.ln2.offset));
            out.push((format!("layer{i}.mlp_in"), &mut l.mlp_in));
            out.push((format!("layer{i}.mlp_in_bias"), &mut l.mlp_in_bias));
            out.push((format!("layer{i}.mlp_out"), &mut l.mlp_out));
            out.push((format!("layer{i}.mlp_out_bias"), &mut l.mlp_out_bias));
        }
        out.push(("ln_f.gain".into(), &mut self.ln_f.gain));
        out.push(("ln_f.offset".into(), &mut self.ln_f.offset));
        if let Some(h) = &mut self.head {
            out.push(("head".into(), h));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Elementwise in-place `self += scale * other` across all tensors.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let theirs = other.named_tensors();
        for ((_, mine), (_, that)) in self.named_tensors_mut().into_iter().zip(theirs) {
            mine.add_scaled(that, scale);
        }
    }

    pub fn scale_all(&mut self, factor: T) {
        for (_, m) in self.named_tensors_mut() {
            m.scale(factor);
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ma), (nb, mb))| na == nb && ma.bits_eq(mb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> LmConfig {
        LmConfig {
            vocab_size: 11,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            context_len: 6,
            seed: 7,
            precision: Precision::F64,
            tie_embeddings: true,
        }
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let mut c = tiny_config();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.context_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a: ModelState<f64> = ModelState::init(tiny_config()).unwrap();
        let b: ModelState<f64> = ModelState::init(tiny_config()).unwrap();
        assert!(a.bits_eq(&b));
        let mut other = tiny_config();
        other.seed = 8;
        let c: ModelState<f64> = ModelState::init(other).unwrap();
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn init_statistics_match_scheme() {
        let mut c = tiny_config();
        c.vocab_size = 500;
        c.precision = Precision::F32;
        let m: ModelState<f32> = ModelState::init(c).unwrap();
        let w = &m.layers[0].wq;
        let mean: f32 = w.as_slice().iter().sum::<f32>() / w.len() as f32;
        let var: f32 =
            w.as_slice().iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / w.len() as f32;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 0.01, "std {}", var.sqrt());
        assert!(m.layers[0].ln1.gain.as_slice().iter().all(|&g| g == 1.0));
        assert!(m.layers[0].mlp_in_bias.as_slice().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn tied_model_has_no_separate_head() {
        let m: ModelState<f64> = ModelState::init(tiny_config()).unwrap();
        assert!(m.head.is_none());
        assert_eq!(m.head_matrix().rows(), 11);
        let mut c = tiny_config();
        c.tie_embeddings = false;
        let m: ModelState<f64> = ModelState::init(c).unwrap();
        assert!(m.head.is_some());
        assert_eq!(m.num_params(), m.zeros_like().num_params());
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let c = tiny_config(); // precision f64
        assert!(ModelState::<f32>::init(c).is_err());
    }

    #[test]
    fn param_count_matches_formula() {
        let c = tiny_config();
        let m: ModelState<f64> = ModelState::init(c.clone()).unwrap();
        let d = c.embed_dim;
        let per_layer = 2 * (2 * d) + 4 * d * d + 4 * d * d + 4 * d + 4 * d * d + d;
        let expected = c.vocab_size * d + c.context_len * d + c.num_layers * per_layer + 2 * d;
        assert_eq!(m.num_params(), expected);
    }
}
