//! Corpus preparation: cleaning real text and generating synthetic
//! planted-bias corpora.
//!
//! Cleaning is a deliberately simple rule-based pass: sentences end at a run
//! of `.` `!` `?` followed by whitespace (or end of line), get trimmed and
//! lowercased, and must clear a minimum word count. The synthetic generator
//! is the controlled counterpart of a scraped corpus: it plants a known
//! association strength between identity terms and negative frames so the
//! whole train-score-debias loop can be validated against ground truth.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{IDENTITY_SLOT, NAME_POOL, NAME_SLOT};
use crate::error::{Error, Result};
use crate::lexicon::{AxisKind, IdentityLexicon};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    pub min_words_per_line: usize,
    pub lowercase: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            min_words_per_line: 2,
            lowercase: true,
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_words_per_line < 1 {
            return Err(Error::Config("min_words_per_line must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanStats {
    pub lines_in: usize,
    pub invalid_lines: usize,
    pub sentences_kept: usize,
    pub sentences_dropped: usize,
}

fn split_sentences(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut after_terminator = false;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() && after_terminator {
            out.push(&line[start..i]);
            start = i;
            after_terminator = false;
        } else {
            after_terminator = matches!(ch, '.' | '!' | '?');
        }
    }
    out.push(&line[start..]);
    out
}

/// Clean raw bytes into one sentence per output entry. Lines that are not
/// valid UTF-8 are skipped and counted rather than failing the run.
pub fn clean_corpus(raw: &[u8], cfg: &CleanConfig) -> Result<(Vec<String>, CleanStats)> {
    cfg.validate()?;
    let mut stats = CleanStats::default();
    let mut sentences = Vec::new();
    for line in raw.split(|&b| b == b'\n') {
        stats.lines_in += 1;
        let Ok(line) = std::str::from_utf8(line) else {
            stats.invalid_lines += 1;
            continue;
        };
        for candidate in split_sentences(line.trim_end_matches('\r')) {
            let candidate = candidate.trim();
            if candidate.is_empty() {
                continue;
            }
            if candidate.split_whitespace().count() < cfg.min_words_per_line {
                stats.sentences_dropped += 1;
                continue;
            }
            sentences.push(if cfg.lowercase {
                candidate.to_lowercase()
            } else {
                candidate.to_string()
            });
        }
    }
    stats.sentences_kept = sentences.len();
    Ok((sentences, stats))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Probability that a negative frame carries a marginalized identity
    /// term (affirming frames mirror this: marginalized with 1 - rate).
    pub stereotype_rate: f64,
    pub n_sentences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            stereotype_rate: 0.9,
            n_sentences: 4000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.stereotype_rate) || !self.stereotype_rate.is_finite() {
            return Err(Error::Config(format!(
                "stereotype_rate must be in [0,1], got {}",
                self.stereotype_rate
            )));
        }
        if self.n_sentences < 1 {
            return Err(Error::Config("n_sentences must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    Negative,
    Affirming,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Negative => "negative",
            Polarity::Affirming => "affirming",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "negative" => Ok(Polarity::Negative),
            "affirming" => Ok(Polarity::Affirming),
            other => Err(Error::Parse {
                path: "<labels>".into(),
                message: format!("unknown polarity {other:?}"),
            }),
        }
    }
}

/// Ground truth for one synthetic sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLabel {
    pub polarity: Polarity,
    pub term: String,
    pub axis: AxisKind,
    pub marginalized: bool,
    pub frame_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub sentences: Vec<String>,
    pub labels: Vec<SynthLabel>,
}

/// Generate `n_sentences` deterministic sentences. Frames are (frame_id,
/// text) with one identity slot, as produced by
/// `bench::builtin_negative_frames` / `builtin_affirming_frames`.
pub fn generate_synth_corpus(
    cfg: &SynthConfig,
    lexicon: &IdentityLexicon,
    negative: &[(String, String)],
    affirming: &[(String, String)],
) -> Result<SynthCorpus> {
    cfg.validate()?;
    if negative.is_empty() || affirming.is_empty() {
        return Err(Error::Config("frame lists must be non-empty".into()));
    }
    if lexicon.axes().is_empty() {
        return Err(Error::Lexicon("lexicon has no axes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sentences = Vec::with_capacity(cfg.n_sentences);
    let mut labels = Vec::with_capacity(cfg.n_sentences);
    for _ in 0..cfg.n_sentences {
        let polarity = if rng.gen_bool(0.5) {
            Polarity::Negative
        } else {
            Polarity::Affirming
        };
        let axis = &lexicon.axes()[rng.gen_range(0..lexicon.axes().len())];
        let frames = match polarity {
            Polarity::Negative => negative,
            Polarity::Affirming => affirming,
        };
        let (frame_id, text) = &frames[rng.gen_range(0..frames.len())];
        let marginalized = match polarity {
            Polarity::Negative => rng.gen_bool(cfg.stereotype_rate),
            Polarity::Affirming => rng.gen_bool(1.0 - cfg.stereotype_rate),
        };
        let side = if marginalized {
            &axis.marginalized
        } else {
            &axis.dominant
        };
        let term = &side[rng.gen_range(0..side.len())];
        let name = NAME_POOL[rng.gen_range(0..NAME_POOL.len())];
        let sentence = text
            .replace(NAME_SLOT, name)
            .replace(IDENTITY_SLOT, term)
            .to_lowercase();
        sentences.push(sentence);
        labels.push(SynthLabel {
            polarity,
            term: term.clone(),
            axis: axis.kind,
            marginalized,
            frame_id: frame_id.clone(),
        });
    }
    Ok(SynthCorpus { sentences, labels })
}

const LABELS_HEADER: &str = "polarity\tterm\taxis\tmarginalized\tframe_id";

pub fn labels_to_tsv(labels: &[SynthLabel]) -> String {
    let mut out = String::from(LABELS_HEADER);
    out.push('\n');
    for l in labels {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            l.polarity.as_str(),
            l.term,
            l.axis.as_str(),
            l.marginalized,
            l.frame_id
        );
    }
    out
}

pub fn labels_from_tsv(text: &str) -> Result<Vec<SynthLabel>> {
    let mut lines = text.lines();
    if lines.next() != Some(LABELS_HEADER) {
        return Err(Error::Parse {
            path: "<labels>".into(),
            message: "missing labels header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: "<labels>".into(),
            message: format!("line {}: {msg}", i + 2),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        out.push(SynthLabel {
            polarity: Polarity::parse(fields[0])?,
            term: fields[1].to_string(),
            axis: AxisKind::parse(fields[2]).map_err(|e| err(e.to_string()))?,
            marginalized: fields[3]
                .parse()
                .map_err(|_| err(format!("bad bool {:?}", fields[3])))?,
            frame_id: fields[4].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{builtin_affirming_frames, builtin_negative_frames};
    use proptest::prelude::*;

    #[test]
    fn one_word_lines_are_dropped() {
        let (out, stats) = clean_corpus(b"Breaking\nThe bill passed today.", &CleanConfig::default()).unwrap();
        assert_eq!(out, vec!["the bill passed today.".to_string()]);
        assert_eq!(stats.sentences_dropped, 1);
        assert_eq!(stats.sentences_kept, 1);
        assert_eq!(stats.lines_in, 2);
    }

    #[test]
    fn terminator_runs_split_sentences() {
        let (out, _) = clean_corpus(b"A b. C d! E f?", &CleanConfig::default()).unwrap();
        assert_eq!(out, vec!["a b.", "c d!", "e f?"]);

        // Terminator runs stay attached; the one-word "Wait..." only
        // survives with the word floor lowered.
        let lenient = CleanConfig {
            min_words_per_line: 1,
            ..CleanConfig::default()
        };
        let (out, _) = clean_corpus(b"Wait... what now?! Done here.", &lenient).unwrap();
        assert_eq!(out, vec!["wait...", "what now?!", "done here."]);
    }

    #[test]
    fn invalid_utf8_lines_are_counted_not_fatal() {
        let raw = b"good line here.\n\xff\xfe broken\nanother fine line.";
        let (out, stats) = clean_corpus(raw, &CleanConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(stats.invalid_lines, 1);
    }

    #[test]
    fn lowercase_flag_respected() {
        let cfg = CleanConfig {
            lowercase: false,
            ..CleanConfig::default()
        };
        let (out, _) = clean_corpus(b"The Bill Passed.", &cfg).unwrap();
        assert_eq!(out, vec!["The Bill Passed."]);
    }

    #[test]
    fn min_words_validation() {
        let cfg = CleanConfig {
            min_words_per_line: 0,
            ..CleanConfig::default()
        };
        assert!(clean_corpus(b"x", &cfg).is_err());
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent_and_honors_min_words(
            text in "[a-zA-Z .!?\r\n]{0,300}",
            min_words in 1usize..4,
        ) {
            let cfg = CleanConfig { min_words_per_line: min_words, lowercase: true };
            let (once, stats) = clean_corpus(text.as_bytes(), &cfg).unwrap();
            prop_assert_eq!(stats.sentences_kept, once.len());
            for s in &once {
                prop_assert!(s.split_whitespace().count() >= min_words);
            }
            let rejoined = once.join("\n");
            let (twice, _) = clean_corpus(rejoined.as_bytes(), &cfg).unwrap();
            prop_assert_eq!(&once, &twice);
        }
    }

    fn synth(p: f64, n: usize, seed: u64) -> SynthCorpus {
        generate_synth_corpus(
            &SynthConfig {
                stereotype_rate: p,
                n_sentences: n,
                seed,
            },
            &IdentityLexicon::default_terms(),
            &builtin_negative_frames(),
            &builtin_affirming_frames(),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth(0.7, 200, 11);
        let b = synth(0.7, 200, 11);
        assert_eq!(a, b);
        let c = synth(0.7, 200, 12);
        assert_ne!(a.sentences, c.sentences);
    }

    #[test]
    fn labels_align_with_sentences() {
        let corpus = synth(0.8, 300, 3);
        assert_eq!(corpus.sentences.len(), corpus.labels.len());
        for (s, l) in corpus.sentences.iter().zip(&corpus.labels) {
            assert!(s.contains(&l.term), "{s:?} lacks {:?}", l.term);
        }
    }

    #[test]
    fn extreme_rate_is_deterministic_association() {
        let corpus = synth(1.0, 500, 4);
        for l in &corpus.labels {
            match l.polarity {
                Polarity::Negative => assert!(l.marginalized),
                Polarity::Affirming => assert!(!l.marginalized),
            }
        }
    }

    #[test]
    fn balanced_rate_within_binomial_bound() {
        let corpus = synth(0.5, 10_000, 5);
        let negative: Vec<_> = corpus
            .labels
            .iter()
            .filter(|l| l.polarity == Polarity::Negative)
            .collect();
        let marg = negative.iter().filter(|l| l.marginalized).count() as f64;
        let share = marg / negative.len() as f64;
        assert!((share - 0.5).abs() < 0.02, "share {share}");
    }

    #[test]
    fn planted_rate_recovered() {
        let corpus = synth(0.9, 10_000, 6);
        let negative: Vec<_> = corpus
            .labels
            .iter()
            .filter(|l| l.polarity == Polarity::Negative)
            .collect();
        let marg = negative.iter().filter(|l| l.marginalized).count() as f64;
        let share = marg / negative.len() as f64;
        assert!((share - 0.9).abs() < 0.02, "share {share}");
    }

    #[test]
    fn label_tsv_round_trip() {
        let corpus = synth(0.6, 50, 7);
        let tsv = labels_to_tsv(&corpus.labels);
        let back = labels_from_tsv(&tsv).unwrap();
        assert_eq!(back, corpus.labels);
    }

    #[test]
    fn bad_configs_rejected() {
        let lex = IdentityLexicon::default_terms();
        let neg = builtin_negative_frames();
        let aff = builtin_affirming_frames();
        let bad = SynthConfig {
            stereotype_rate: 1.5,
            ..SynthConfig::default()
        };
        assert!(generate_synth_corpus(&bad, &lex, &neg, &aff).is_err());
        assert!(
            generate_synth_corpus(&SynthConfig::default(), &lex, &[], &aff).is_err()
        );
    }
}
