//! Word error rate, relative improvement, timing and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditOp {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// Minimal unit-cost edit script turning `reference` into `hypothesis`.
/// Ties prefer match/substitution, then deletion, then insertion.
pub fn edit_script<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                ops.push(if same { EditOp::Match } else { EditOp::Substitute });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp::Delete);
            i -= 1;
        } else {
            ops.push(EditOp::Insert);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Character-level Levenshtein distance.
pub fn char_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_script(&a, &b).iter().filter(|o| **o != EditOp::Match).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    /// Set when the reference is empty; `wer` is then the insertion count.
    pub empty_reference: bool,
}

impl WerResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

pub fn wer(reference: &str, hypothesis: &str) -> WerResult {
    let r = normalize_words(reference);
    let h = normalize_words(hypothesis);
    let ops = edit_script(&r, &h);
    let count = |k| ops.iter().filter(|o| **o == k).count();
    let (s, d, i) = (count(EditOp::Substitute), count(EditOp::Delete), count(EditOp::Insert));
    let empty = r.is_empty();
    WerResult {
        wer: (s + d + i) as f64 / r.len().max(1) as f64,
        substitutions: s,
        deletions: d,
        insertions: i,
        reference_words: r.len(),
        empty_reference: empty,
    }
}

/// Total errors over total reference words.
pub fn corpus_wer<'a>(results: impl IntoIterator<Item = &'a WerResult>) -> f64 {
    let (mut errors, mut words) = (0usize, 0usize);
    for r in results {
        errors += r.errors();
        words += r.reference_words;
    }
    errors as f64 / words.max(1) as f64
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// `100 * (baseline - system) / baseline`, to one decimal.
pub fn relative_improvement(baseline_wer: f64, system_wer: f64) -> Result<f64> {
    if !(baseline_wer > 0.0) || !baseline_wer.is_finite() || !system_wer.is_finite() {
        return Err(Error::param(format!(
            "relative improvement needs a positive baseline WER (got {baseline_wer})"
        )));
    }
    Ok(round1(100.0 * (baseline_wer - system_wer) / baseline_wer))
}

/// Runs `stage` once and returns its output with the elapsed wall-clock seconds.
pub fn time_utterance<T>(stage: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = stage();
    (out, start.elapsed().as_secs_f64())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceDetail {
    pub utterance_id: String,
    pub reference: String,
    pub hypothesis: String,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    pub empty_reference: bool,
    pub seconds: f64,
}

impl UtteranceDetail {
    pub fn score(utterance_id: &str, reference: &str, hypothesis: &str, seconds: f64) -> Self {
        let w = wer(reference, hypothesis);
        Self {
            utterance_id: utterance_id.to_string(),
            reference: reference.to_string(),
            hypothesis: hypothesis.to_string(),
            substitutions: w.substitutions,
            deletions: w.deletions,
            insertions: w.insertions,
            reference_words: w.reference_words,
            empty_reference: w.empty_reference,
            seconds,
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub system: String,
    pub wer_percent: f64,
    /// `None` for the baseline row, and for every row when the baseline WER is zero.
    pub relative_improvement_percent: Option<f64>,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemDetail {
    pub system: String,
    pub utterances: Vec<UtteranceDetail>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// First row is the baseline.
    pub rows: Vec<SystemRow>,
    #[serde(default)]
    pub details: Vec<SystemDetail>,
}

impl EvalReport {
    /// Rows from per-utterance detail, in the given order; the first system is the baseline.
    pub fn from_details(details: Vec<SystemDetail>) -> Result<Self> {
        let mut rows: Vec<SystemRow> = Vec::with_capacity(details.len());
        for d in &details {
            let (mut errors, mut words) = (0usize, 0usize);
            for u in &d.utterances {
                errors += u.errors();
                words += u.reference_words;
            }
            let wer_percent = 100.0 * errors as f64 / words.max(1) as f64;
            let seconds: Vec<f64> = d.utterances.iter().map(|u| u.seconds).collect();
            let rel = match rows.first() {
                Some(base) if base.wer_percent > 0.0 => Some(relative_improvement(base.wer_percent, wer_percent)?),
                _ => None,
            };
            rows.push(SystemRow {
                system: d.system.clone(),
                wer_percent,
                relative_improvement_percent: rel,
                mean_seconds: mean(&seconds),
            });
        }
        Ok(Self { rows, details })
    }

    /// Rows given directly as (system, WER %, seconds); improvements are computed.
    pub fn from_rows(rows: &[(&str, f64, f64)]) -> Result<Self> {
        let mut out = Vec::with_capacity(rows.len());
        for (i, &(name, w, s)) in rows.iter().enumerate() {
            out.push(SystemRow {
                system: name.to_string(),
                wer_percent: w,
                relative_improvement_percent: if i == 0 {
                    None
                } else {
                    Some(relative_improvement(rows[0].1, w)?)
                },
                mean_seconds: s,
            });
        }
        Ok(Self { rows: out, details: Vec::new() })
    }

    /// The three published systems with their WER and per-utterance times.
    pub fn table1_fixture() -> Self {
        Self::from_rows(&[
            ("Deep Speech (RNN-Based ASR baseline)", 36.0, 1.42),
            ("Transformer based ASR (proposed)", 32.5, 0.73),
            ("Transformer + LLM Correction (proposed)", 30.0, 0.78),
        ])
        .expect("positive baseline")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TableText,
    Csv,
    PlotData,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table-text" | "table" | "text" => Ok(Self::TableText),
            "csv" => Ok(Self::Csv),
            "plot-data" | "plot" => Ok(Self::PlotData),
            other => Err(Error::param(format!(
                "unknown report format `{other}` (expected table-text, csv or plot-data)"
            ))),
        }
    }
}

pub const TABLE_COLUMNS: [&str; 4] = [
    "System",
    "WER (%)",
    "Relative improvement (%)",
    "Average time taken per utterance (sec)",
];
pub const CSV_HEADER: &str = "system,wer_percent,relative_improvement_percent,seconds";
pub const PLOT_HEADER: &str = "system,wer_percent,seconds";

/// Shortest decimal form with at most `places` decimals.
fn num(x: f64, places: usize) -> String {
    let s = format!("{x:.places$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::TableText => {
            let cells: Vec<[String; 4]> = report
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    [
                        r.system.clone(),
                        num(r.wer_percent, 2),
                        r.relative_improvement_percent.map_or_else(
                            || if i == 0 { "Baseline".to_string() } else { "n/a".to_string() },
                            |v| num(v, 1),
                        ),
                        num(r.mean_seconds, 2),
                    ]
                })
                .collect();
            let mut widths = TABLE_COLUMNS.map(str::len);
            for row in &cells {
                for (w, c) in widths.iter_mut().zip(row) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let line = |cols: [&str; 4]| {
                let mut s = String::new();
                for (i, c) in cols.iter().enumerate() {
                    if i > 0 {
                        s.push_str(" | ");
                    }
                    let _ = write!(s, "{c:<width$}", width = widths[i]);
                }
                s.trim_end().to_string()
            };
            out.push_str(&line(TABLE_COLUMNS));
            out.push('\n');
            out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
            out.push('\n');
            for row in &cells {
                out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
                out.push('\n');
            }
        }
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for (i, r) in report.rows.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    csv_field(&r.system),
                    r.wer_percent,
                    r.relative_improvement_percent.map_or_else(
                        || if i == 0 { "baseline".to_string() } else { "n/a".to_string() },
                        |v| v.to_string()
                    ),
                    r.mean_seconds
                );
            }
        }
        ReportFormat::PlotData => {
            out.push_str(PLOT_HEADER);
            out.push('\n');
            for r in &report.rows {
                let _ = writeln!(out, "{},{},{}", csv_field(&r.system), r.wer_percent, r.mean_seconds);
            }
        }
    }
    out
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render_report(report, format))?;
    Ok(())
}

/// Parses the CSV rendering back into system rows.
pub fn parse_report_csv(text: &str) -> Result<EvalReport> {
    let bad = |detail: String| Error::Format {
        path: "<report csv>".into(),
        detail,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(bad(format!("expected header `{CSV_HEADER}`, found {other:?}"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let f = split_csv_line(line);
        if f.len() != 4 {
            return Err(bad(format!("row {}: expected 4 fields, found {}", n + 1, f.len())));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: `{s}`: {e}", n + 1)))
        };
        rows.push(SystemRow {
            system: f[0].clone(),
            wer_percent: parse(&f[1])?,
            relative_improvement_percent: match f[2].trim() {
                "baseline" | "n/a" => None,
                v => Some(parse(v)?),
            },
            mean_seconds: parse(&f[3])?,
        });
    }
    Ok(EvalReport { rows, details: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn wer_examples() {
        let w = wer("the cat sat", "the cat sat");
        assert_eq!((w.wer, w.substitutions, w.deletions, w.insertions), (0.0, 0, 0, 0));
        let w = wer("the cat sat", "the bat sat");
        assert_eq!((w.substitutions, w.deletions, w.insertions), (1, 0, 0));
        assert_abs_diff_eq!(w.wer, 1.0 / 3.0, epsilon = 1e-15);
        let w = wer("a b", "");
        assert_eq!((w.wer, w.substitutions, w.deletions, w.insertions), (1.0, 0, 2, 0));
        let w = wer("", "x y");
        assert_eq!((w.wer, w.insertions), (2.0, 2));
        assert!(w.empty_reference);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_words("The Cat, sat!  "), vec!["the", "cat", "sat"]);
        assert_eq!(wer("The cat sat.", "the CAT sat").wer, 0.0);
    }

    #[test]
    fn corpus_wer_pools_counts() {
        let a = wer("a b c d", "a b c d");
        let b = wer("x", "y");
        assert_abs_diff_eq!(corpus_wer([&a, &b]), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn relative_improvement_examples() {
        assert_eq!(relative_improvement(36.0, 32.5).unwrap(), 9.7);
        assert_eq!(relative_improvement(36.0, 30.0).unwrap(), 16.7);
        assert_eq!(relative_improvement(12.0, 12.0).unwrap(), 0.0);
        assert!(matches!(relative_improvement(0.0, 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn timing() {
        let ((), s) = time_utterance(|| ());
        assert!(s < 1e-3);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn char_distances() {
        assert_eq!(char_distance("zat", "sat"), 1);
        assert_eq!(char_distance("zat", "at"), 1);
        assert_eq!(char_distance("kitten", "sitting"), 3);
    }

    #[test]
    fn report_formats() {
        let r = EvalReport::table1_fixture();
        let table = render_report(&r, ReportFormat::TableText);
        assert_eq!(table.lines().count(), 5);
        assert!(table.lines().next().unwrap().starts_with("System"));
        assert!(table.contains("Baseline"));
        let csv = render_report(&r, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(parse_report_csv(&csv).unwrap().rows, r.rows);
        let plot = render_report(&r, ReportFormat::PlotData);
        let lines: Vec<&str> = plot.lines().collect();
        assert_eq!(lines[0], PLOT_HEADER);
        assert_eq!(lines[1], "Deep Speech (RNN-Based ASR baseline),36,1.42");
        assert_eq!(lines[2], "Transformer based ASR (proposed),32.5,0.73");
        assert_eq!(lines[3], "Transformer + LLM Correction (proposed),30,0.78");
    }

    #[test]
    fn csv_quotes_commas() {
        let r = EvalReport::from_rows(&[("a, \"b\"", 10.0, 1.0), ("c", 5.0, 2.0)]).unwrap();
        let back = parse_report_csv(&render_report(&r, ReportFormat::Csv)).unwrap();
        assert_eq!(back.rows, r.rows);
    }

    #[test]
    fn detail_reconstructs_rows() {
        let details = vec![
            SystemDetail {
                system: "base".into(),
                utterances: vec![
                    UtteranceDetail::score("u1", "a b c", "a x c", 1.0),
                    UtteranceDetail::score("u2", "d e", "d", 3.0),
                ],
            },
            SystemDetail {
                system: "better".into(),
                utterances: vec![
                    UtteranceDetail::score("u1", "a b c", "a b c", 0.5),
                    UtteranceDetail::score("u2", "d e", "d", 0.5),
                ],
            },
        ];
        let r = EvalReport::from_details(details).unwrap();
        assert_abs_diff_eq!(r.rows[0].wer_percent, 40.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.rows[1].wer_percent, 20.0, epsilon = 1e-12);
        assert_eq!(r.rows[1].relative_improvement_percent, Some(50.0));
        assert_eq!(r.rows[0].mean_seconds, 2.0);
    }

    #[test]
    fn perfect_baseline_has_no_improvement() {
        let details = ["base", "other"]
            .map(|s| SystemDetail {
                system: s.into(),
                utterances: vec![UtteranceDetail::score("u1", "a b", "a b", 1.0)],
            })
            .to_vec();
        let r = EvalReport::from_details(details).unwrap();
        assert_eq!(r.rows[1].relative_improvement_percent, None);
        let csv = render_report(&r, ReportFormat::Csv);
        assert!(csv.lines().nth(2).unwrap().contains(",n/a,"));
        assert_eq!(parse_report_csv(&csv).unwrap().rows, r.rows);
        assert!(render_report(&r, ReportFormat::TableText).contains("n/a"));
    }

    proptest! {
        #[test]
        fn self_wer_is_zero(s in "[a-zA-Z ,.!]{0,40}") {
            prop_assert_eq!(wer(&s, &s).errors(), 0);
        }

        #[test]
        fn case_and_punctuation_invariant(s in "[a-z ]{0,30}", t in "[a-z ]{0,30}") {
            let loud = format!("{}!", s.to_uppercase());
            prop_assert_eq!(wer(&s, &t), wer(&loud, &t));
        }

        #[test]
        fn errors_bounded(s in "[abc ]{0,20}", t in "[abc ]{0,20}") {
            let w = wer(&s, &t);
            let (r, h) = (normalize_words(&s).len(), normalize_words(&t).len());
            prop_assert!(w.errors() <= r.max(h));
            prop_assert!(w.errors() >= r.abs_diff(h));
        }
    }
}
