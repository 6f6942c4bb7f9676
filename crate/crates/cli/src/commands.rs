//! Subcommand implementations. Each one reads its inputs from the output
//! directory (or the configured paths), writes its artifacts back there,
//! records them in the run manifest, and returns a one-line summary.
//!
//! Fixed artifact names wire the pipeline together: `synth-corpus` or
//! `clean-corpus` produce `corpus.txt`, `build-bench` produces
//! `benchmark.tsv`, `train` produces `model_base.ckpt` and the adapter
//! checkpoints, `score` produces `scores_<mode>.tsv`, and `report` renders
//! from those. A missing upstream artifact fails with a hint naming the
//! command that would have produced it.

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use fairtune::adapters::AdaptedModel;
use fairtune::autodiff::{grad_check, GradCheckOptions};
use fairtune::bench::{
    self, builtin_affirming_frames, builtin_negative_frames, builtin_templates, Template,
};
use fairtune::checkpoint::{
    load_adapter, load_model, save_lora, save_model, save_soft_prompt, LoadedAdapter, LoadedModel,
};
use fairtune::corpus::{clean_corpus, generate_synth_corpus};
use fairtune::error::{Error, Result};
use fairtune::external::ExternalBackend;
use fairtune::lexicon::IdentityLexicon;
use fairtune::math::Real;
use fairtune::metrics::{aggregate_report, BiasReport, ReportOptions, RunMode};
use fairtune::model::{LmConfig, ModelState, Precision};
use fairtune::report::render_report;
use fairtune::scoring::{
    score_pairs, scores_from_tsv, scores_to_tsv, Backend, BuiltinBackend, PairScore,
};
use fairtune::stats::PairedSample;
use fairtune::tokenizer::Tokenizer;
use fairtune::train::{train, TrainOutcome};

use crate::config::{BackendSpec, RunConfig, TokenizerMode};
use crate::manifest::{sha256_hex, update_manifest};

pub const CORPUS_FILE: &str = "corpus.txt";
pub const BENCH_FILE: &str = "benchmark.tsv";
pub const MODEL_FILE: &str = "model_base.ckpt";
pub const LORA_FILE: &str = "adapter_lora.ckpt";
pub const SOFT_FILE: &str = "adapter_soft_prompt.ckpt";

fn scores_file(mode: RunMode) -> String {
    format!("scores_{}.tsv", mode.as_str())
}

fn scores_meta_file(mode: RunMode) -> String {
    format!("scores_{}.json", mode.as_str())
}

/// Side record for a scoring run: the counts that cannot be reconstructed
/// from the scores TSV alone.
#[derive(serde::Serialize, serde::Deserialize)]
struct ScoreMeta {
    mode: RunMode,
    backend: String,
    n_scored: usize,
    n_failed: usize,
    n_excluded: usize,
}

fn record(cfg: &RunConfig, command: &str, files: &[PathBuf]) -> Result<()> {
    // The output location does not shape artifact bytes, so it stays out of
    // the provenance hash: the same run reproduced into another directory
    // yields an identical manifest.
    let mut canon = cfg.clone();
    canon.out_dir = PathBuf::new();
    let hash = sha256_hex(canon.canonical_toml().as_bytes());
    update_manifest(&cfg.out_dir, &hash, cfg.seed, command, files)
}

fn load_lexicon(cfg: &RunConfig) -> Result<IdentityLexicon> {
    match &cfg.paths.lexicon {
        Some(path) => IdentityLexicon::load(path),
        None => Ok(IdentityLexicon::default_terms()),
    }
}

fn load_template_set(cfg: &RunConfig) -> Result<Vec<Template>> {
    match &cfg.paths.templates {
        Some(path) => bench::load_templates(path),
        None => Ok(builtin_templates()),
    }
}

/// Training text: the pipeline's own `corpus.txt` when present, else the
/// configured external corpus.
fn corpus_lines(cfg: &RunConfig) -> Result<Vec<String>> {
    let pipeline = cfg.out_dir.join(CORPUS_FILE);
    let path = if pipeline.exists() {
        pipeline
    } else if let Some(p) = &cfg.paths.corpus {
        p.clone()
    } else {
        return Err(Error::MissingArtifact(format!(
            "{CORPUS_FILE} (run synth-corpus or clean-corpus first, or set paths.corpus)"
        )));
    };
    let text = fs::read_to_string(&path)?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    if lines.is_empty() {
        return Err(Error::Config(format!("corpus {} is empty", path.display())));
    }
    Ok(lines)
}

/// Token sequences ready for the trainer: too-short lines carry no
/// next-token signal and overlong ones exceed the context window, so both
/// are dropped and counted instead of failing the run.
fn tokenize_for_training(
    tokenizer: &Tokenizer,
    lines: &[String],
    max_len: usize,
) -> (Vec<Vec<u32>>, usize, usize) {
    let mut seqs = Vec::with_capacity(lines.len());
    let (mut short, mut long) = (0, 0);
    for line in lines {
        let toks = tokenizer.tokenize(line);
        if toks.len() < 2 {
            short += 1;
        } else if toks.len() > max_len {
            long += 1;
        } else {
            seqs.push(toks);
        }
    }
    (seqs, short, long)
}

pub fn build_bench(cfg: &RunConfig) -> Result<String> {
    let lexicon = load_lexicon(cfg)?;
    let templates = load_template_set(cfg)?;
    let pairs = bench::expand_benchmark(&templates, &lexicon)?;
    let path = cfg.out_dir.join(BENCH_FILE);
    bench::write_benchmark(&path, &pairs)?;
    record(cfg, "build-bench", &[path.clone()])?;
    Ok(format!(
        "built {} counterfactual pairs from {} templates -> {}",
        pairs.len(),
        templates.len(),
        path.display()
    ))
}

pub fn synth_corpus(cfg: &RunConfig) -> Result<String> {
    let lexicon = load_lexicon(cfg)?;
    let synth = generate_synth_corpus(
        &cfg.synth_config(),
        &lexicon,
        &builtin_negative_frames(),
        &builtin_affirming_frames(),
    )?;
    let path = cfg.out_dir.join(CORPUS_FILE);
    fs::write(&path, synth.sentences.join("\n") + "\n")?;
    record(cfg, "synth-corpus", &[path.clone()])?;
    Ok(format!(
        "generated {} sentences at stereotype rate {} -> {}",
        synth.sentences.len(),
        cfg.synth.stereotype_rate,
        path.display()
    ))
}

pub fn clean_corpus_cmd(cfg: &RunConfig) -> Result<String> {
    let source = cfg.paths.corpus.as_ref().ok_or_else(|| {
        Error::Config("clean-corpus needs paths.corpus to point at raw text".into())
    })?;
    let raw = fs::read(source)?;
    let (sentences, stats) = clean_corpus(&raw, &cfg.clean)?;
    if sentences.is_empty() {
        return Err(Error::Config(format!(
            "no sentences survived cleaning {}",
            source.display()
        )));
    }
    let path = cfg.out_dir.join(CORPUS_FILE);
    fs::write(&path, sentences.join("\n") + "\n")?;
    record(cfg, "clean-corpus", &[path.clone()])?;
    Ok(format!(
        "kept {} sentences ({} dropped, {} invalid lines) -> {}",
        stats.sentences_kept,
        stats.sentences_dropped,
        stats.invalid_lines,
        path.display()
    ))
}

fn outcome_summary(o: &TrainOutcome) -> String {
    let mut s = format!("{} steps", o.steps);
    if o.skipped_steps > 0 {
        s += &format!(" ({} skipped)", o.skipped_steps);
    }
    if let Some(e) = o.best_eval {
        s += &format!(", best eval loss {e:.4}");
    }
    if o.stopped_early {
        s += ", stopped early";
    }
    if o.restored_best {
        s += ", restored best checkpoint";
    }
    s
}

pub fn train_base(cfg: &RunConfig) -> Result<String> {
    let lines = corpus_lines(cfg)?;
    let tokenizer = match cfg.tokenizer.mode {
        TokenizerMode::Byte => Tokenizer::byte(),
        TokenizerMode::Whitespace => {
            Tokenizer::whitespace_from_lines(lines.iter().map(String::as_str))
        }
    };
    let lm = LmConfig {
        vocab_size: tokenizer.vocab_size(),
        embed_dim: cfg.model.embed_dim,
        num_layers: cfg.model.num_layers,
        num_heads: cfg.model.num_heads,
        context_len: cfg.model.context_len,
        seed: cfg.seed,
        precision: cfg.model.precision,
        tie_embeddings: cfg.model.tie_embeddings,
    };

    fn run<T: Real>(
        cfg: &RunConfig,
        lm: LmConfig,
        tokenizer: &Tokenizer,
        lines: &[String],
    ) -> Result<(TrainOutcome, usize, usize, usize)> {
        let mut model = AdaptedModel::new(ModelState::<T>::init(lm)?);
        let (seqs, short, long) =
            tokenize_for_training(tokenizer, lines, model.max_input_len());
        let outcome = train(&mut model, &seqs, Some(tokenizer.pad_id()), &cfg.train_config())?;
        save_model(&cfg.out_dir.join(MODEL_FILE), &model.into_base(), tokenizer)?;
        Ok((outcome, seqs.len(), short, long))
    }

    let (outcome, n_seqs, short, long) = match cfg.model.precision {
        Precision::F32 => run::<f32>(cfg, lm, &tokenizer, &lines)?,
        Precision::F64 => run::<f64>(cfg, lm, &tokenizer, &lines)?,
    };
    let path = cfg.out_dir.join(MODEL_FILE);
    record(cfg, "train-base", &[path.clone()])?;
    let mut summary = format!("trained base model on {n_seqs} sequences: ");
    summary += &outcome_summary(&outcome);
    if short + long > 0 {
        summary += &format!(" ({short} too short, {long} over context, dropped)");
    }
    summary += &format!(" -> {}", path.display());
    Ok(summary)
}

/// Which adapter `train` fits on top of the frozen base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Lora,
    SoftPrompt,
}

pub fn train_adapter(cfg: &RunConfig, kind: AdapterKind) -> Result<String> {
    let model_path = cfg.out_dir.join(MODEL_FILE);
    if !model_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{MODEL_FILE} (run `train base` first)"
        )));
    }
    let (loaded, tokenizer) = load_model(&model_path)?;
    let lines = corpus_lines(cfg)?;

    fn run<T: Real>(
        cfg: &RunConfig,
        base: ModelState<T>,
        tokenizer: &Tokenizer,
        lines: &[String],
        kind: AdapterKind,
    ) -> Result<(TrainOutcome, usize, PathBuf)> {
        let mut model = AdaptedModel::new(base);
        match kind {
            AdapterKind::Lora => model.attach_lora(cfg.lora_config()?)?,
            AdapterKind::SoftPrompt => model.attach_soft_prompt(cfg.soft_prompt_config())?,
        }
        let (seqs, _, _) = tokenize_for_training(tokenizer, lines, model.max_input_len());
        if seqs.is_empty() {
            return Err(Error::Config("no usable training sequences".into()));
        }
        let outcome = train(&mut model, &seqs, Some(tokenizer.pad_id()), &cfg.train_config())?;
        let path = match kind {
            AdapterKind::Lora => {
                let p = cfg.out_dir.join(LORA_FILE);
                save_lora(&p, &model.detach_lora()?)?;
                p
            }
            AdapterKind::SoftPrompt => {
                let p = cfg.out_dir.join(SOFT_FILE);
                save_soft_prompt(&p, &model.detach_soft_prompt()?)?;
                p
            }
        };
        Ok((outcome, seqs.len(), path))
    }

    let (outcome, n_seqs, path) = match loaded {
        LoadedModel::F32(m) => run::<f32>(cfg, m, &tokenizer, &lines, kind)?,
        LoadedModel::F64(m) => run::<f64>(cfg, m, &tokenizer, &lines, kind)?,
    };
    let label = match kind {
        AdapterKind::Lora => "lora",
        AdapterKind::SoftPrompt => "soft prompt",
    };
    record(cfg, &format!("train-{}", label.replace(' ', "-")), &[path.clone()])?;
    Ok(format!(
        "trained {label} adapter on {n_seqs} sequences: {} -> {}",
        outcome_summary(&outcome),
        path.display()
    ))
}

/// Attach the mode's adapter checkpoint (if any) to the loaded base model.
fn adapted_for_mode<T: Real>(
    cfg: &RunConfig,
    base: ModelState<T>,
    mode: RunMode,
    attach_lora: impl FnOnce(&mut AdaptedModel<T>, LoadedAdapter) -> Result<()>,
    attach_soft: impl FnOnce(&mut AdaptedModel<T>, LoadedAdapter) -> Result<()>,
) -> Result<AdaptedModel<T>> {
    let mut model = AdaptedModel::new(base);
    let adapter_path = match mode {
        RunMode::Pretrained => None,
        RunMode::Lora => Some((cfg.out_dir.join(LORA_FILE), "train lora")),
        RunMode::SoftPrompt => Some((cfg.out_dir.join(SOFT_FILE), "train soft-prompt")),
    };
    if let Some((path, producer)) = adapter_path {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} (run `{producer}` first)",
                path.file_name().unwrap().to_string_lossy()
            )));
        }
        let adapter = load_adapter(&path)?;
        match mode {
            RunMode::Lora => attach_lora(&mut model, adapter)?,
            RunMode::SoftPrompt => attach_soft(&mut model, adapter)?,
            RunMode::Pretrained => unreachable!(),
        }
    }
    Ok(model)
}

fn precision_mismatch(path: &str) -> Error {
    Error::Checkpoint(format!("{path} precision does not match the base model"))
}

fn builtin_backend(cfg: &RunConfig, mode: RunMode) -> Result<Box<dyn Backend>> {
    let model_path = cfg.out_dir.join(MODEL_FILE);
    if !model_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{MODEL_FILE} (run `train base` first)"
        )));
    }
    let (loaded, tokenizer) = load_model(&model_path)?;
    match loaded {
        LoadedModel::F32(base) => {
            let model = adapted_for_mode(
                cfg,
                base,
                mode,
                |m, a| match a {
                    LoadedAdapter::LoraF32(l) => m.attach_lora_state(l),
                    _ => Err(precision_mismatch(LORA_FILE)),
                },
                |m, a| match a {
                    LoadedAdapter::SoftPromptF32(s) => m.attach_soft_prompt_state(s),
                    _ => Err(precision_mismatch(SOFT_FILE)),
                },
            )?;
            Ok(Box::new(BuiltinBackend::new(model, tokenizer)))
        }
        LoadedModel::F64(base) => {
            let model = adapted_for_mode(
                cfg,
                base,
                mode,
                |m, a| match a {
                    LoadedAdapter::LoraF64(l) => m.attach_lora_state(l),
                    _ => Err(precision_mismatch(LORA_FILE)),
                },
                |m, a| match a {
                    LoadedAdapter::SoftPromptF64(s) => m.attach_soft_prompt_state(s),
                    _ => Err(precision_mismatch(SOFT_FILE)),
                },
            )?;
            Ok(Box::new(BuiltinBackend::new(model, tokenizer)))
        }
    }
}

pub fn score(cfg: &RunConfig, mode: RunMode) -> Result<String> {
    let bench_path = cfg.out_dir.join(BENCH_FILE);
    if !bench_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{BENCH_FILE} (run `build-bench` first)"
        )));
    }
    let pairs = bench::read_benchmark(&bench_path)?;

    let mut backend: Box<dyn Backend> = match cfg.backend_spec()? {
        BackendSpec::Builtin => builtin_backend(cfg, mode)?,
        BackendSpec::External { program, args } => Box::new(ExternalBackend::spawn(
            &program,
            &args,
            Duration::from_millis(cfg.score.timeout_ms),
            cfg.score.max_in_flight,
        )?),
    };

    let outcome = score_pairs(backend.as_mut(), &pairs);
    if outcome.scores.is_empty() {
        let detail = outcome
            .failures
            .first()
            .map(|f| format!("; first failure: {}", f.error))
            .unwrap_or_default();
        return Err(Error::Backend {
            backend: backend.name().to_string(),
            message: format!("no pair produced a score{detail}"),
        });
    }

    let tsv_path = cfg.out_dir.join(scores_file(mode));
    fs::write(&tsv_path, scores_to_tsv(&outcome.scores))?;
    let meta = ScoreMeta {
        mode,
        backend: backend.name().to_string(),
        n_scored: outcome.scores.len(),
        n_failed: outcome.failures.len(),
        n_excluded: outcome.excluded_empty_suffix.len(),
    };
    let meta_path = cfg.out_dir.join(scores_meta_file(mode));
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
    )?;
    record(cfg, "score", &[tsv_path.clone(), meta_path])?;
    Ok(format!(
        "scored {} pairs ({} failed, {} excluded) with {} -> {}",
        meta.n_scored,
        meta.n_failed,
        meta.n_excluded,
        meta.backend,
        tsv_path.display()
    ))
}

fn load_scores(cfg: &RunConfig, mode: RunMode) -> Result<(Vec<PairScore>, ScoreMeta)> {
    let tsv_path = cfg.out_dir.join(scores_file(mode));
    if !tsv_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (run `score --mode {}` first)",
            scores_file(mode),
            mode.as_str()
        )));
    }
    let scores = scores_from_tsv(&fs::read_to_string(&tsv_path)?)?;
    let meta_path = cfg.out_dir.join(scores_meta_file(mode));
    let meta = if meta_path.exists() {
        serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| Error::Parse {
            path: meta_path.display().to_string(),
            message: e.to_string(),
        })?
    } else {
        ScoreMeta {
            mode,
            backend: "unknown".into(),
            n_scored: scores.len(),
            n_failed: 0,
            n_excluded: 0,
        }
    };
    Ok((scores, meta))
}

fn aggregate(
    cfg: &RunConfig,
    lexicon: &IdentityLexicon,
    pairs: &[fairtune::bench::CounterfactualPair],
    mode: RunMode,
    baseline: Option<&BiasReport>,
) -> Result<(BiasReport, Vec<PairScore>)> {
    let (scores, meta) = load_scores(cfg, mode)?;
    let options = ReportOptions {
        model: cfg.model_label.clone(),
        mode,
        epsilon: cfg.epsilon,
        top_k: cfg.report.top_k,
        n_failed: meta.n_failed,
        n_excluded: meta.n_excluded,
    };
    let report = aggregate_report(&scores, pairs, lexicon, baseline, &options)?;
    Ok((report, scores))
}

/// Deltas keyed by pair id, for pairing two scoring runs.
fn deltas_by_pair(scores: &[PairScore]) -> std::collections::BTreeMap<&str, f64> {
    scores
        .iter()
        .map(|s| (s.pair_id.as_str(), s.delta()))
        .collect()
}

/// Paired per-pair deltas for two runs, restricted to pairs both scored.
fn paired_deltas(before: &[PairScore], after: &[PairScore]) -> Result<PairedSample> {
    let b = deltas_by_pair(before);
    let a = deltas_by_pair(after);
    let mut labels = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (id, bv) in &b {
        if let Some(av) = a.get(id) {
            labels.push((*id).to_string());
            xs.push(*bv);
            ys.push(*av);
        }
    }
    PairedSample::new(labels, xs, ys)
}

pub fn report(cfg: &RunConfig, mode: RunMode, baseline: Option<RunMode>) -> Result<String> {
    let bench_path = cfg.out_dir.join(BENCH_FILE);
    if !bench_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{BENCH_FILE} (run `build-bench` first)"
        )));
    }
    let pairs = bench::read_benchmark(&bench_path)?;
    let lexicon = load_lexicon(cfg)?;

    let mut reports = Vec::new();
    let mut stats = Vec::new();
    let base = match baseline {
        Some(b) => {
            let (r, s) = aggregate(cfg, &lexicon, &pairs, b, None)?;
            Some((r, s))
        }
        None => None,
    };
    let (main_report, main_scores) =
        aggregate(cfg, &lexicon, &pairs, mode, base.as_ref().map(|(r, _)| r))?;
    if let Some((r, s)) = base {
        stats = paired_deltas(&s, &main_scores)?.analyze()?;
        reports.push(r);
    }
    reports.push(main_report);

    let rendered = render_report(&reports, &stats)?;
    let stem = format!("report_{}", mode.as_str());
    let txt_path = cfg.out_dir.join(format!("{stem}.txt"));
    fs::write(&txt_path, rendered.combined())?;
    let json_path = cfg.out_dir.join(format!("{stem}.json"));
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n",
    )?;
    let delta_path = cfg.out_dir.join(format!("deltas_{}.tsv", mode.as_str()));
    fs::write(&delta_path, &rendered.delta_tsv)?;
    record(cfg, "report", &[txt_path.clone(), json_path, delta_path])?;

    let overall = reports.last().expect("at least one report").overall;
    let vs = match (baseline, reports.first()) {
        (Some(b), Some(first)) if reports.len() == 2 => {
            format!(" (baseline {} {:.2})", b.as_str(), first.overall)
        }
        _ => String::new(),
    };
    Ok(format!(
        "{} bias score {overall:.2}{vs} -> {}",
        mode.as_str(),
        txt_path.display()
    ))
}

pub fn stats_cmd(cfg: &RunConfig, before: RunMode, after: RunMode) -> Result<String> {
    let (b, _) = load_scores(cfg, before)?;
    let (a, _) = load_scores(cfg, after)?;
    let results = paired_deltas(&b, &a)?.analyze()?;
    let mut text = String::new();
    for r in &results {
        let effect = r
            .effect_size
            .map(|d| format!(", effect size {}", fmt_stat(d)))
            .unwrap_or_default();
        text += &format!(
            "{}: statistic {}, p {}{effect}, n {}  [{}]\n",
            r.test,
            fmt_stat(r.statistic),
            fmt_stat(r.p_value),
            r.n,
            r.note
        );
    }
    let path = cfg.out_dir.join(format!(
        "stats_{}_vs_{}.txt",
        after.as_str(),
        before.as_str()
    ));
    fs::write(&path, &text)?;
    record(cfg, "stats", &[path.clone()])?;
    let t = results
        .iter()
        .find(|r| r.test == "paired-t")
        .map(|r| format!("t {}, p {}", fmt_stat(r.statistic), fmt_stat(r.p_value)))
        .unwrap_or_else(|| "no t-test result".into());
    Ok(format!(
        "paired {} -> {} over {} pairs: {t} -> {}",
        before.as_str(),
        after.as_str(),
        results.first().map_or(0, |r| r.n),
        path.display()
    ))
}

/// Finite-difference audit of the analytic gradients on a throwaway f64
/// model built from the configured dimensions, with both adapter kinds
/// attached so every parameter class is exercised.
pub fn grad_check_cmd(cfg: &RunConfig, per_class: usize) -> Result<String> {
    let lm = LmConfig {
        vocab_size: 101,
        embed_dim: cfg.model.embed_dim,
        num_layers: cfg.model.num_layers,
        num_heads: cfg.model.num_heads,
        context_len: cfg.model.context_len,
        seed: cfg.seed,
        precision: Precision::F64,
        tie_embeddings: cfg.model.tie_embeddings,
    };
    let mut model = AdaptedModel::new(ModelState::<f64>::init(lm)?);
    model.attach_lora(cfg.lora_config()?)?;
    model.attach_soft_prompt(cfg.soft_prompt_config())?;

    let len = model.max_input_len().min(16).max(2);
    let tokens: Vec<u32> = (0..len as u32).map(|i| (i * 37 + cfg.seed as u32) % 101).collect();
    let opts = GradCheckOptions {
        per_class,
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&mut model, &tokens, None, &opts)?;
    for class in &report.classes {
        println!(
            "  {:<12} {} coords, max rel err {:.3e} (worst {})",
            class.class, class.coords, class.max_rel_err, class.worst
        );
    }
    if !report.passed() {
        return Err(Error::NonFinite(format!(
            "gradient check failed: max rel err {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.tolerance
        )));
    }
    Ok(format!(
        "gradients match finite differences: max rel err {:.3e} over {} classes (tolerance {:.1e})",
        report.max_rel_err,
        report.classes.len(),
        report.tolerance
    ))
}
