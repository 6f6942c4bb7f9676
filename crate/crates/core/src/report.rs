//! Human-readable and machine-readable rendering of bias reports.
//!
//! Three artifacts come out of a set of reports: per-term score tables (one
//! per axis, rows = model runs, `*` flags the per-term maximum), top-gap
//! listings for qualitative audit, and a baseline-delta TSV suitable for
//! plotting. All output is deterministic byte-for-byte for fixed input.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::lexicon::AxisKind;
use crate::metrics::BiasReport;
use crate::stats::StatResult;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub score_tables: String,
    pub gap_listing: String,
    pub delta_tsv: String,
    pub stats_summary: String,
}

impl RenderedReport {
    /// All sections in one printable document. Sections that are empty are
    /// omitted entirely.
    pub fn combined(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.score_tables);
        if !self.gap_listing.is_empty() {
            out.push('\n');
            out.push_str(&self.gap_listing);
        }
        if !self.delta_tsv.is_empty() {
            out.push_str("\n# score change vs baseline\n");
            out.push_str(&self.delta_tsv);
        }
        if !self.stats_summary.is_empty() {
            out.push_str("\n# statistics\n");
            out.push_str(&self.stats_summary);
        }
        out
    }
}

fn run_label(report: &BiasReport) -> String {
    format!("{} {}", report.model, report.mode.as_str())
}

/// Render score tables, gap listings, the baseline-delta file, and the
/// stats summary for a set of runs over the same benchmark. All reports
/// must carry the same term set (same lexicon, same axes).
pub fn render_report(reports: &[BiasReport], stats: &[StatResult]) -> Result<RenderedReport> {
    if reports.is_empty() {
        return Err(Error::Stats("nothing to render: no reports".into()));
    }
    let reference: Vec<(AxisKind, &str)> = reports[0]
        .terms
        .iter()
        .map(|t| (t.axis, t.term.as_str()))
        .collect();
    for r in &reports[1..] {
        let terms: Vec<(AxisKind, &str)> =
            r.terms.iter().map(|t| (t.axis, t.term.as_str())).collect();
        if terms != reference {
            return Err(Error::Stats(format!(
                "reports disagree on the term set: {} vs {}",
                run_label(&reports[0]),
                run_label(r)
            )));
        }
    }

    Ok(RenderedReport {
        score_tables: render_score_tables(reports),
        gap_listing: render_gap_listing(reports),
        delta_tsv: render_delta_tsv(reports),
        stats_summary: render_stats(stats),
    })
}

fn render_score_tables(reports: &[BiasReport]) -> String {
    let mut out = String::new();
    let axes: BTreeSet<AxisKind> = reports[0].terms.iter().map(|t| t.axis).collect();
    for axis in axes {
        let terms: Vec<&str> = reports[0]
            .terms
            .iter()
            .filter(|t| t.axis == axis)
            .map(|t| t.term.as_str())
            .collect();
        let _ = writeln!(out, "# bias scores: {axis}");
        out.push_str("run");
        for term in &terms {
            let _ = write!(out, "\t{term}");
        }
        out.push_str("\toverall\n");

        // Column maxima get the flag, mirroring the bolded per-group peaks.
        let value_of = |r: &BiasReport, term: &str| -> f64 {
            r.terms
                .iter()
                .find(|t| t.axis == axis && t.term == term)
                .map(|t| t.score.value)
                .expect("term sets verified equal")
        };
        let mut col_max: Vec<f64> = Vec::new();
        for term in &terms {
            let max = reports
                .iter()
                .map(|r| value_of(r, term))
                .fold(f64::NEG_INFINITY, f64::max);
            col_max.push(max);
        }
        for r in reports {
            let _ = write!(out, "{}", run_label(r));
            for (term, &max) in terms.iter().zip(&col_max) {
                let v = value_of(r, term);
                let flag = if v == max { "*" } else { "" };
                let _ = write!(out, "\t{v:.2}{flag}");
            }
            let overall = r
                .axes
                .iter()
                .find(|a| a.axis == axis)
                .map(|a| a.overall)
                .expect("axis present");
            let _ = writeln!(out, "\t{overall:.2}");
        }
        out.push('\n');
    }
    out
}

fn render_gap_listing(reports: &[BiasReport]) -> String {
    let mut out = String::new();
    for r in reports {
        if r.top_gaps.is_empty() {
            continue;
        }
        let _ = writeln!(out, "# largest log-likelihood gaps: {}", run_label(r));
        out.push_str("delta\tcounter_term\tsentence\n");
        for g in &r.top_gaps {
            let _ = writeln!(out, "{:+.4}\t{}\t{}", g.delta, g.counter_term, g.sentence);
        }
        out.push('\n');
    }
    out
}

const DELTA_HEADER: &str = "term\taxis\tmode\tdelta";

fn render_delta_tsv(reports: &[BiasReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let Some(deltas) = &r.baseline_delta else {
            continue;
        };
        if out.is_empty() {
            out.push_str(DELTA_HEADER);
            out.push('\n');
        }
        for d in deltas {
            // Score-scale points, two decimals like the score tables. Exact
            // per-term scores live in the JSON report for anyone doing math.
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.2}",
                d.term,
                d.axis.as_str(),
                r.mode.as_str(),
                d.delta
            );
        }
    }
    out
}

/// Four decimals, switching to scientific notation below 1e-4 so extreme
/// p-values stay readable instead of printing hundreds of zeros.
pub fn fmt_stat(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-4 {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

fn render_stats(stats: &[StatResult]) -> String {
    if stats.is_empty() {
        return String::new();
    }
    let mut out = String::from("test\tstatistic\tp_value\teffect_size\tn\tnote\n");
    for s in stats {
        let effect = match s.effect_size {
            Some(e) => fmt_stat(e),
            None => "-".into(),
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.test,
            fmt_stat(s.statistic),
            fmt_stat(s.p_value),
            effect,
            s.n,
            s.note
        );
    }
    out
}

/// One parsed score-table cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCell {
    pub run: String,
    pub axis: AxisKind,
    pub term: String,
    pub value: f64,
    pub flagged: bool,
}

/// Parse a rendered score table back into cells; used to guarantee the
/// rendering is lossless at the printed precision.
pub fn parse_score_tables(text: &str) -> Result<Vec<ParsedCell>> {
    let mut cells = Vec::new();
    let mut axis: Option<AxisKind> = None;
    let mut terms: Vec<String> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# bias scores: ") {
            axis = Some(AxisKind::parse(rest)?);
            terms.clear();
            continue;
        }
        if line.is_empty() || !line.contains('\t') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields[0] == "run" {
            terms = fields[1..fields.len() - 1]
                .iter()
                .map(|s| s.to_string())
                .collect();
            continue;
        }
        let axis = axis.ok_or_else(|| Error::Parse {
            path: "<score table>".into(),
            message: "data row before any axis header".into(),
        })?;
        if fields.len() != terms.len() + 2 {
            return Err(Error::Parse {
                path: "<score table>".into(),
                message: format!("row has {} fields, expected {}", fields.len(), terms.len() + 2),
            });
        }
        for (term, raw) in terms.iter().zip(&fields[1..fields.len() - 1]) {
            let flagged = raw.ends_with('*');
            let digits = raw.trim_end_matches('*');
            let value: f64 = digits.parse().map_err(|_| Error::Parse {
                path: "<score table>".into(),
                message: format!("bad cell {raw:?}"),
            })?;
            cells.push(ParsedCell {
                run: fields[0].to_string(),
                axis,
                term: term.clone(),
                value,
                flagged,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{builtin_templates, expand_benchmark};
    use crate::lexicon::IdentityLexicon;
    use crate::metrics::{aggregate_report, ReportOptions, RunMode};
    use crate::scoring::PairScore;

    fn fabricated_reports() -> Vec<BiasReport> {
        let lex = IdentityLexicon::default_terms();
        let pairs = expand_benchmark(&builtin_templates(), &lex).unwrap();
        let mk = |mode: RunMode, bias: f64| {
            let scores: Vec<PairScore> = pairs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let wobble = ((i * 37 + p.marginalized_term.len()) % 13) as f64 - 6.0;
                    PairScore {
                        pair_id: p.pair_id.clone(),
                        axis: p.axis,
                        marginalized_term: p.marginalized_term.clone(),
                        dominant_term: p.dominant_term.clone(),
                        ll_marginalized: -20.0 + bias + wobble / 10.0,
                        ll_dominant: -20.0,
                        backend: "test".into(),
                    }
                })
                .collect();
            let opts = ReportOptions {
                mode,
                ..ReportOptions::default()
            };
            aggregate_report(&scores, &pairs, &lex, None, &opts).unwrap()
        };
        let pretrained = mk(RunMode::Pretrained, 0.4);
        let mut tuned = mk(RunMode::Lora, -0.1);
        // Re-aggregate the tuned run against the pretrained baseline.
        tuned.baseline_delta = Some(
            tuned
                .terms
                .iter()
                .zip(&pretrained.terms)
                .map(|(now, was)| crate::metrics::TermDelta {
                    term: now.term.clone(),
                    axis: now.axis,
                    delta: now.score.value - was.score.value,
                })
                .collect(),
        );
        vec![pretrained, tuned]
    }

    #[test]
    fn rendering_is_deterministic() {
        let reports = fabricated_reports();
        let a = render_report(&reports, &[]).unwrap();
        let b = render_report(&reports, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.combined(), b.combined());
    }

    #[test]
    fn tables_round_trip_at_printed_precision() {
        let reports = fabricated_reports();
        let rendered = render_report(&reports, &[]).unwrap();
        let cells = parse_score_tables(&rendered.score_tables).unwrap();
        let n_terms: usize = reports[0].terms.len();
        assert_eq!(cells.len(), n_terms * reports.len());
        for cell in &cells {
            let report = reports
                .iter()
                .find(|r| run_label(r) == cell.run)
                .expect("run label resolves");
            let term = report
                .terms
                .iter()
                .find(|t| t.axis == cell.axis && t.term == cell.term)
                .expect("term present");
            let printed = (term.score.value * 100.0).round() / 100.0;
            assert!((cell.value - printed).abs() < 1e-9);
        }
    }

    #[test]
    fn per_term_maxima_are_flagged() {
        let reports = fabricated_reports();
        let rendered = render_report(&reports, &[]).unwrap();
        let cells = parse_score_tables(&rendered.score_tables).unwrap();
        // The pretrained run was fabricated with uniformly higher deltas,
        // so it should hold every flag.
        for cell in cells {
            if cell.run.ends_with("pretrained") {
                assert!(cell.flagged, "expected flag on {cell:?}");
            } else {
                assert!(!cell.flagged, "unexpected flag on {cell:?}");
            }
        }
    }

    #[test]
    fn gap_listing_shows_counter_term_and_sentence() {
        let reports = fabricated_reports();
        let rendered = render_report(&reports, &[]).unwrap();
        let top = &reports[0].top_gaps[0];
        assert!(rendered.gap_listing.contains(&top.sentence));
        assert!(rendered.gap_listing.contains(&top.counter_term));
    }

    #[test]
    fn delta_file_covers_baselined_runs_only() {
        let reports = fabricated_reports();
        let rendered = render_report(&reports, &[]).unwrap();
        let lines: Vec<&str> = rendered.delta_tsv.lines().collect();
        // Header plus one row per term of the single baselined run.
        assert_eq!(lines.len(), 1 + reports[1].terms.len());
        assert_eq!(lines[0], "term\taxis\tmode\tdelta");
        assert!(lines[1..].iter().all(|l| l.contains("\tlora\t")));
        for line in &lines[1..] {
            let delta = line.rsplit('\t').next().unwrap();
            let (_, frac) = delta.split_once('.').expect("two-decimal delta");
            assert_eq!(frac.len(), 2, "delta not rounded: {line}");
        }

        let no_baseline = vec![reports[0].clone()];
        let rendered = render_report(&no_baseline, &[]).unwrap();
        assert!(rendered.delta_tsv.is_empty());
        assert!(!rendered.combined().contains("baseline"));
    }

    #[test]
    fn stats_section_only_when_present() {
        let reports = fabricated_reports();
        let without = render_report(&reports, &[]).unwrap();
        assert!(without.stats_summary.is_empty());
        assert!(!without.combined().contains("# statistics"));

        let stat = StatResult {
            test: "paired-t".into(),
            statistic: -4.98,
            p_value: 0.004,
            effect_size: Some(-1.76),
            n: 21,
            note: "example".into(),
        };
        let with = render_report(&reports, &[stat]).unwrap();
        assert!(with.combined().contains("# statistics"));
        assert!(with.stats_summary.contains("paired-t"));
        assert!(with.stats_summary.contains("-1.76"));

        // Extreme p-values switch to scientific notation instead of
        // printing a wall of zeros.
        let tiny = StatResult {
            test: "paired-t".into(),
            statistic: -49.15866800485065,
            p_value: 1.7021936960944297e-301,
            effect_size: Some(-1.340912602353761),
            n: 1344,
            note: "".into(),
        };
        let rendered = render_report(&reports, &[tiny]).unwrap();
        assert!(rendered.stats_summary.contains("1.702e-301"));
        assert!(rendered.stats_summary.contains("-49.1587"));
    }

    #[test]
    fn mismatched_term_sets_are_rejected() {
        let mut reports = fabricated_reports();
        reports[1].terms.remove(0);
        assert!(render_report(&reports, &[]).is_err());
    }
}
