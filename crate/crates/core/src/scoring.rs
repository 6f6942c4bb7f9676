//! Scoring backends and counterfactual pair evaluation.
//!
//! A backend answers one question: the total log-probability of a suffix
//! given a prefix. The builtin backend runs the in-process model; the
//! external backend (see `external`) shells out over a line protocol. Pair
//! scoring asks each backend twice per pair, once per identity variant, and
//! keeps partial results when individual pairs fail.

use std::fmt::Write as _;

use crate::adapters::AdaptedModel;
use crate::bench::CounterfactualPair;
use crate::error::{Error, Result};
use crate::lexicon::AxisKind;
use crate::math::Real;
use crate::tokenizer::Tokenizer;

/// Log-probability oracle. Implementations must be deterministic: the same
/// (prefix, suffix) twice returns bitwise-identical values.
pub trait Backend {
    fn name(&self) -> &str;

    /// Natural-log probability of `suffix` conditioned on `prefix`, summed
    /// over suffix tokens. An empty suffix scores exactly 0.
    fn conditional_ll(&mut self, prefix: &str, suffix: &str) -> Result<f64>;

    /// How many requests the backend can usefully have outstanding at once.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Score many (prefix, suffix) requests; element i answers request i.
    /// The default is a serial loop; pipelined backends override it.
    fn conditional_ll_batch(&mut self, requests: &[(String, String)]) -> Vec<Result<f64>> {
        requests
            .iter()
            .map(|(p, s)| self.conditional_ll(p, s))
            .collect()
    }
}

/// In-process scoring over an `AdaptedModel`.
pub struct BuiltinBackend<T> {
    model: AdaptedModel<T>,
    tokenizer: Tokenizer,
}

impl<T: Real> BuiltinBackend<T> {
    pub fn new(model: AdaptedModel<T>, tokenizer: Tokenizer) -> Self {
        Self { model, tokenizer }
    }

    pub fn model(&self) -> &AdaptedModel<T> {
        &self.model
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn into_parts(self) -> (AdaptedModel<T>, Tokenizer) {
        (self.model, self.tokenizer)
    }
}

impl<T: Real> Backend for BuiltinBackend<T> {
    fn name(&self) -> &str {
        "builtin"
    }

    fn conditional_ll(&mut self, prefix: &str, suffix: &str) -> Result<f64> {
        if suffix.is_empty() {
            return Ok(0.0);
        }
        let p = self.tokenizer.tokenize(prefix);
        let s = self.tokenizer.tokenize(suffix);
        if s.is_empty() {
            return Ok(0.0);
        }
        if p.is_empty() {
            return Err(Error::Backend {
                backend: "builtin".into(),
                message: "prefix tokenizes to nothing; cannot condition".into(),
            });
        }
        let mut seq = p.clone();
        seq.extend_from_slice(&s);
        let rows = self.model.logprob_rows(&seq)?;
        let mut ll = 0.0;
        for (j, &tok) in s.iter().enumerate() {
            ll += rows.get(p.len() - 1 + j, tok as usize).to_f64();
        }
        Ok(ll)
    }

    // Scoring never mutates the model, so any number of requests could run
    // at once; the bound is effectively "no bound".
    fn max_in_flight(&self) -> usize {
        usize::MAX
    }
}

/// One scored pair: both conditional log-likelihoods plus the join keys
/// (pair id, axis, terms) that metrics aggregation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub pair_id: String,
    pub axis: AxisKind,
    pub marginalized_term: String,
    pub dominant_term: String,
    pub ll_marginalized: f64,
    pub ll_dominant: f64,
    pub backend: String,
}

impl PairScore {
    /// Positive when the marginalized variant is the more likely one.
    pub fn delta(&self) -> f64 {
        self.ll_marginalized - self.ll_dominant
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFailure {
    pub pair_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreOutcome {
    pub scores: Vec<PairScore>,
    /// Pairs whose backend calls failed; scoring continued past them.
    pub failures: Vec<PairFailure>,
    /// Pair ids skipped because the identity token ends the sentence, which
    /// leaves nothing to condition on.
    pub excluded_empty_suffix: Vec<String>,
}

/// Score every pair, two backend calls each. Backend errors on one pair do
/// not abort the rest.
pub fn score_pairs(backend: &mut dyn Backend, pairs: &[CounterfactualPair]) -> ScoreOutcome {
    let mut out = ScoreOutcome::default();
    let mut requests: Vec<(String, String)> = Vec::new();
    let mut live: Vec<&CounterfactualPair> = Vec::new();
    for pair in pairs {
        if pair.has_empty_suffix() {
            out.excluded_empty_suffix.push(pair.pair_id.clone());
            continue;
        }
        requests.push(pair.marginalized_parts());
        requests.push(pair.dominant_parts());
        live.push(pair);
    }
    let backend_name = backend.name().to_string();
    let answers = backend.conditional_ll_batch(&requests);
    debug_assert_eq!(answers.len(), requests.len());
    let mut it = answers.into_iter();
    let mut short = || {
        Err(Error::Backend {
            backend: backend_name.clone(),
            message: "backend returned too few answers".into(),
        })
    };
    for pair in live {
        let m = it.next().unwrap_or_else(&mut short);
        let d = it.next().unwrap_or_else(&mut short);
        match (m, d) {
            (Ok(ll_m), Ok(ll_d)) => out.scores.push(PairScore {
                pair_id: pair.pair_id.clone(),
                axis: pair.axis,
                marginalized_term: pair.marginalized_term.clone(),
                dominant_term: pair.dominant_term.clone(),
                ll_marginalized: ll_m,
                ll_dominant: ll_d,
                backend: backend_name.clone(),
            }),
            (m, d) => {
                let error = match (m, d) {
                    (Err(e), _) | (_, Err(e)) => e.to_string(),
                    _ => unreachable!(),
                };
                out.failures.push(PairFailure {
                    pair_id: pair.pair_id.clone(),
                    error,
                });
            }
        }
    }
    out
}

const SCORES_HEADER: &str =
    "pair_id\taxis\tmarginalized_term\tdominant_term\tll_marginalized\tll_dominant\tdelta\tbackend";

/// Scores as TSV; floats print in shortest round-trip form, so parsing the
/// file back reproduces every value bit for bit.
pub fn scores_to_tsv(scores: &[PairScore]) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for s in scores {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.pair_id,
            s.axis.as_str(),
            s.marginalized_term,
            s.dominant_term,
            s.ll_marginalized,
            s.ll_dominant,
            s.delta(),
            s.backend
        );
    }
    out
}

pub fn scores_from_tsv(text: &str) -> Result<Vec<PairScore>> {
    let mut lines = text.lines();
    if lines.next() != Some(SCORES_HEADER) {
        return Err(Error::Parse {
            path: "<scores>".into(),
            message: "missing scores header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: "<scores>".into(),
            message: format!("line {}: {msg}", i + 2),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", fields.len())));
        }
        let float = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| err(format!("bad float {:?}", fields[j])))
        };
        let score = PairScore {
            pair_id: fields[0].to_string(),
            axis: AxisKind::parse(fields[1]).map_err(|e| err(e.to_string()))?,
            marginalized_term: fields[2].to_string(),
            dominant_term: fields[3].to_string(),
            ll_marginalized: float(4)?,
            ll_dominant: float(5)?,
            backend: fields[7].to_string(),
        };
        let delta = float(6)?;
        // The delta column is derived; a mismatch means a hand-edited or
        // corrupted file.
        if delta.to_bits() != score.delta().to_bits() {
            return Err(err(format!(
                "delta column {} does not match ll difference {}",
                delta,
                score.delta()
            )));
        }
        out.push(score);
    }
    Ok(out)
}
