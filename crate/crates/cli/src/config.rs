//! Run configuration: one TOML file covering every subcommand, plus the seed
//! derivation that fans the root seed out to the stochastic pieces.
//!
//! Precedence, lowest to highest: built-in defaults, the config file, command
//! line flags. The config file path itself comes from `--config`, falling
//! back to the `FAIRTUNE_CONFIG` environment variable; when neither is given
//! and `fairtune.toml` exists in the working directory it is used, otherwise
//! everything runs on defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fairtune::adapters::{LoraConfig, SoftPromptConfig, SoftPromptInit};
use fairtune::corpus::{CleanConfig, SynthConfig};
use fairtune::error::{Error, Result};
use fairtune::model::Precision;
use fairtune::train::TrainConfig;

/// Sub-seeds are the root seed xor a fixed tag, so adapter initialization
/// does not reuse the exact stream that initialized the base weights.
const LORA_SEED_TAG: u64 = 0x6c6f_7261; // "lora"
const SOFT_SEED_TAG: u64 = 0x736f_6674; // "soft"

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stochastic component derives from it.
    pub seed: u64,
    /// Neutrality tolerance on log-likelihood deltas.
    pub epsilon: f64,
    /// All artifacts land here; the run manifest and writer lock live here too.
    pub out_dir: PathBuf,
    /// Label stamped into reports.
    pub model_label: String,
    pub paths: PathsSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub lora: LoraSection,
    pub soft_prompt: SoftPromptSection,
    pub synth: SynthSection,
    pub clean: CleanConfig,
    pub score: ScoreSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epsilon: 1e-6,
            out_dir: PathBuf::from("out"),
            model_label: "tiny-lm".into(),
            paths: PathsSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            lora: LoraSection::default(),
            soft_prompt: SoftPromptSection::default(),
            synth: SynthSection::default(),
            clean: CleanConfig::default(),
            score: ScoreSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Identity lexicon TOML; builtin terms when absent.
    pub lexicon: Option<PathBuf>,
    /// Template TSV (axis, frame_id, text); builtin templates when absent.
    pub templates: Option<PathBuf>,
    /// Text corpus consumed by `train` and `clean-corpus`.
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerMode {
    /// Bytes plus a pad symbol; vocabulary 257, no training data needed.
    Byte,
    /// Whitespace-separated words collected from the training corpus.
    Whitespace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub mode: TokenizerMode,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::Whitespace,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub context_len: usize,
    pub precision: Precision,
    pub tie_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            context_len: 64,
            precision: Precision::F32,
            tie_embeddings: true,
        }
    }
}

/// [train] minus the seed: training randomness always follows the root seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub accum_steps: usize,
    pub micro_batch: usize,
    pub eval_fraction: f64,
    pub eval_every: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub optimizer: fairtune::optim::AdafactorConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            accum_steps: t.accum_steps,
            micro_batch: t.micro_batch,
            eval_fraction: t.eval_fraction,
            eval_every: t.eval_every,
            patience: t.patience,
            min_delta: t.min_delta,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Names as in the checkpoint: wq, wk, wv, wo, mlp_in, mlp_out.
    pub targets: Vec<String>,
}

impl Default for LoraSection {
    fn default() -> Self {
        let l = LoraConfig::default();
        Self {
            rank: l.rank,
            alpha: l.alpha,
            dropout: l.dropout,
            targets: l.targets.iter().map(|t| t.as_str().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftPromptSection {
    pub virtual_tokens: usize,
    pub init: SoftPromptInit,
}

impl Default for SoftPromptSection {
    fn default() -> Self {
        let s = SoftPromptConfig::default();
        Self {
            virtual_tokens: s.virtual_tokens,
            init: s.init,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub stereotype_rate: f64,
    pub n_sentences: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            stereotype_rate: s.stereotype_rate,
            n_sentences: s.n_sentences,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    /// `builtin`, or `external:<command line>` for a subprocess scorer.
    pub backend: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            backend: "builtin".into(),
            timeout_ms: 10_000,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Largest-gap records listed per run.
    pub top_k: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { top_k: 5 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        self.clean.validate()?;
        self.train_config().validate()?;
        if self.score.max_in_flight == 0 {
            return Err(Error::Config("score.max_in_flight must be at least 1".into()));
        }
        if self.score.timeout_ms == 0 {
            return Err(Error::Config("score.timeout_ms must be positive".into()));
        }
        self.backend_spec()?;
        // Lora targets and the full lora/soft-prompt configs are validated
        // against the model at attach time; parse the target names eagerly so
        // a typo fails before any training happens.
        for t in &self.lora.targets {
            fairtune::adapters::LoraTargetKind::parse(t)?;
        }
        Ok(())
    }

    /// The effective config serialized back to TOML; hashed into the run
    /// manifest so artifact provenance survives flag overrides.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            accum_steps: self.train.accum_steps,
            micro_batch: self.train.micro_batch,
            eval_fraction: self.train.eval_fraction,
            eval_every: self.train.eval_every,
            patience: self.train.patience,
            min_delta: self.train.min_delta,
            seed: self.seed,
            optimizer: self.train.optimizer.clone(),
        }
    }

    pub fn lora_config(&self) -> Result<LoraConfig> {
        let targets = self
            .lora
            .targets
            .iter()
            .map(|t| fairtune::adapters::LoraTargetKind::parse(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoraConfig {
            rank: self.lora.rank,
            alpha: self.lora.alpha,
            dropout: self.lora.dropout,
            targets,
            seed: self.seed ^ LORA_SEED_TAG,
        })
    }

    pub fn soft_prompt_config(&self) -> SoftPromptConfig {
        SoftPromptConfig {
            virtual_tokens: self.soft_prompt.virtual_tokens,
            init: self.soft_prompt.init,
            seed: self.seed ^ SOFT_SEED_TAG,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            stereotype_rate: self.synth.stereotype_rate,
            n_sentences: self.synth.n_sentences,
            seed: self.seed,
        }
    }

    /// Parsed `score.backend`.
    pub fn backend_spec(&self) -> Result<BackendSpec> {
        let raw = self.score.backend.trim();
        if raw == "builtin" {
            return Ok(BackendSpec::Builtin);
        }
        if let Some(cmd) = raw.strip_prefix("external:") {
            let words: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if words.is_empty() {
                return Err(Error::Config(
                    "external backend needs a command after the colon".into(),
                ));
            }
            return Ok(BackendSpec::External {
                program: words[0].clone(),
                args: words[1..].to_vec(),
            });
        }
        Err(Error::Config(format!(
            "backend must be `builtin` or `external:<command>`, got {raw:?}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Builtin,
    External { program: String, args: Vec<String> },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.canonical_toml(), text);
        back.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("sead = 3").unwrap_err();
        assert!(err.to_string().contains("sead"));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[lora]\nrank = 2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lora.rank, 2);
        assert_eq!(cfg.lora.alpha, LoraConfig::default().alpha);
        assert_eq!(cfg.epsilon, 1e-6);
    }

    #[test]
    fn seed_fanout_separates_streams() {
        let cfg: RunConfig = toml::from_str("seed = 5").unwrap();
        let lora = cfg.lora_config().unwrap().seed;
        let soft = cfg.soft_prompt_config().seed;
        assert_ne!(lora, 5);
        assert_ne!(soft, 5);
        assert_ne!(lora, soft);
        assert_eq!(cfg.train_config().seed, 5);
        assert_eq!(cfg.synth_config().seed, 5);
    }

    #[test]
    fn backend_spec_parses_external_commands() {
        let mut cfg = RunConfig::default();
        cfg.score.backend = "external:python3 scorer.py --fast".into();
        match cfg.backend_spec().unwrap() {
            BackendSpec::External { program, args } => {
                assert_eq!(program, "python3");
                assert_eq!(args, vec!["scorer.py", "--fast"]);
            }
            other => panic!("unexpected {other:?}"),
        }
        cfg.score.backend = "remote:foo".into();
        assert!(cfg.backend_spec().is_err());
    }

    #[test]
    fn bad_target_name_fails_validation() {
        let cfg: RunConfig = toml::from_str("[lora]\ntargets = [\"wx\"]").unwrap();
        assert!(cfg.validate().is_err());
    }
}
