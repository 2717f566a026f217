//! Session metrics and report rendering.
//!
//! Accuracies are percentages. `A_b` and `A_n` are accuracies restricted to
//! samples whose true class is a base or a novel class; `A_h` is their
//! harmonic mean and `Δ = |acc_T − acc_0| / acc_0 × 100` is the relative
//! decline from the first to the last session.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::adaptor::CacheStats;
use crate::embedding::ClassId;
use crate::protocol::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples to score")]
    EmptyInput,
    #[error("{predictions} predictions for {truths} labels")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("both accuracies are zero")]
    BothZero,
    #[error("need at least two sessions")]
    TooFewSessions,
    #[error("first-session accuracy is zero")]
    ZeroBaseAccuracy,
    #[error("no session contains novel classes")]
    NoNovelSessions,
}

fn check_lengths<T>(predictions: &[T], truths: &[T]) -> Result<(), MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

pub fn accuracy<T: PartialEq>(predictions: &[T], truths: &[T]) -> Result<f64, MetricsError> {
    check_lengths(predictions, truths)?;
    let correct = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / truths.len() as f64)
}

/// `(A_b, A_n)`; a side without samples is `None`.
pub fn split_accuracy<T: Ord>(
    predictions: &[T],
    truths: &[T],
    base: &BTreeSet<T>,
) -> Result<(Option<f64>, Option<f64>), MetricsError> {
    check_lengths(predictions, truths)?;
    let mut tally = [(0usize, 0usize); 2];
    for (p, t) in predictions.iter().zip(truths) {
        let side = &mut tally[usize::from(!base.contains(t))];
        side.0 += 1;
        side.1 += usize::from(p == t);
    }
    let pct = |(n, c): (usize, usize)| (n > 0).then(|| 100.0 * c as f64 / n as f64);
    Ok((pct(tally[0]), pct(tally[1])))
}

/// Harmonic mean of base and novel accuracy; zero when either side is zero.
pub fn harmonic(base: f64, novel: f64) -> Result<f64, MetricsError> {
    if base == 0.0 && novel == 0.0 {
        return Err(MetricsError::BothZero);
    }
    if base == 0.0 || novel == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Relative decline between the first and last entries, in percent.
pub fn delta(accuracies: &[f64]) -> Result<f64, MetricsError> {
    let (first, last) = match accuracies {
        [first, .., last] => (*first, *last),
        _ => return Err(MetricsError::TooFewSessions),
    };
    if first == 0.0 {
        return Err(MetricsError::ZeroBaseAccuracy);
    }
    Ok((last - first).abs() / first * 100.0)
}

/// Mean `A_h` over the sessions that have one.
pub fn mean_harmonic(sessions: &[SessionReport]) -> Result<f64, MetricsError> {
    let values: Vec<f64> = sessions.iter().filter_map(|s| s.harmonic).collect();
    if values.is_empty() {
        return Err(MetricsError::NoNovelSessions);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub class_id: ClassId,
    pub n: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    pub classes_seen: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub base_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
    pub harmonic: Option<f64>,
    pub per_class: Vec<ClassTally>,
    pub cache: CacheStats,
    /// FNV-1a digest of the evaluated stream order and its predictions.
    pub stream_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub sessions: Vec<SessionReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionAggregate {
    pub session: usize,
    pub classes_seen: usize,
    pub n_test: usize,
    pub accuracy: Summary,
    pub base_accuracy: Option<Summary>,
    pub novel_accuracy: Option<Summary>,
    pub harmonic: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    /// `"trained"` or `"checkpoint"`.
    pub source: String,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub no_cache_baseline: bool,
    pub alignment: AlignmentSummary,
    pub trials: Vec<TrialReport>,
    pub sessions: Vec<SessionAggregate>,
    pub delta: Option<f64>,
    pub mean_harmonic: Option<f64>,
}

impl ExperimentReport {
    /// Aggregates trials session by session, in trial order.
    pub fn assemble(
        config: ExperimentConfig,
        alignment: AlignmentSummary,
        trials: Vec<TrialReport>,
    ) -> Self {
        let n_sessions = trials.first().map_or(0, |t| t.sessions.len());
        let sessions: Vec<SessionAggregate> = (0..n_sessions)
            .map(|s| {
                let rows: Vec<&SessionReport> = trials.iter().map(|t| &t.sessions[s]).collect();
                let collect = |f: fn(&SessionReport) -> Option<f64>| {
                    Summary::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
                };
                SessionAggregate {
                    session: s,
                    classes_seen: rows[0].classes_seen,
                    n_test: rows[0].n_test,
                    accuracy: collect(|r| Some(r.accuracy)).expect("at least one trial"),
                    base_accuracy: collect(|r| r.base_accuracy),
                    novel_accuracy: collect(|r| r.novel_accuracy),
                    harmonic: collect(|r| r.harmonic),
                }
            })
            .collect();
        let joint: Vec<f64> = sessions.iter().map(|s| s.accuracy.mean).collect();
        let harmonics: Vec<f64> = sessions.iter().filter_map(|s| s.harmonic.map(|h| h.mean)).collect();
        Self {
            no_cache_baseline: config.alpha == 0.0,
            delta: delta(&joint).ok(),
            mean_harmonic: Summary::of(&harmonics).map(|s| s.mean),
            config,
            alignment,
            trials,
            sessions,
        }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.sessions.last().map(|s| s.accuracy.mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(format!("unknown report format {other:?} (json, csv, md)")),
        }
    }
}

pub fn emit_report(report: &ExperimentReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => canonical_json(&serde_json::to_value(report).expect("report serializes")),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
    }
}

fn fixed(x: f64, places: usize) -> String {
    let s = format!("{x:.places$}");
    // Avoid "-0.0000".
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Pretty JSON with sorted keys and floats printed to four decimals (nonzero
/// magnitudes below `5e-5` use exponent notation).
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_json(value, 0, &mut out);
    out.push('\n');
    out
}

fn write_json(value: &Value, depth: usize, out: &mut String) {
    let pad = |d: usize| "  ".repeat(d);
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let x = n.as_f64().unwrap();
                // Tiny hyperparameters (epsilon, learning rates) would round to zero.
                if x != 0.0 && x.abs() < 5e-5 {
                    out.push_str(&format!("{x:e}"));
                } else {
                    out.push_str(&fixed(x, 4));
                }
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                write_json(item, depth + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_json(&map[*k], depth + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push('}');
        }
    }
}

pub const CSV_HEADER: [&str; 7] = ["trial", "session", "n_test", "acc", "A_b", "A_n", "A_h"];

fn render_csv(report: &ExperimentReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    let opt = |x: Option<f64>| x.map(|v| fixed(v, 4)).unwrap_or_default();
    for t in &report.trials {
        for s in &t.sessions {
            w.write_record([
                t.trial.to_string(),
                s.session.to_string(),
                s.n_test.to_string(),
                fixed(s.accuracy, 4),
                opt(s.base_accuracy),
                opt(s.novel_accuracy),
                opt(s.harmonic),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn render_markdown(report: &ExperimentReport) -> String {
    let one = |x: f64| fixed(x, 1);
    let opt = |x: Option<Summary>| x.map_or("-".to_string(), |s| one(s.mean));
    let mut out = String::new();
    let label = if report.no_cache_baseline { "no-cache baseline" } else { "adaptor" };

    let header: Vec<String> = report.sessions.iter().map(|s| s.classes_seen.to_string()).collect();
    let accs: Vec<String> = report.sessions.iter().map(|s| one(s.accuracy.mean)).collect();
    let delta = report.delta.map_or("-".to_string(), one);
    let _ = writeln!(out, "| Method | {} | Δ |", header.join(" | "));
    let _ = writeln!(out, "|---|{}---|", "---|".repeat(header.len()));
    let _ = writeln!(out, "| {label} | {} | {delta} |", accs.join(" | "));
    out.push('\n');

    let _ = writeln!(out, "| Session | Classes | Test | Acc | A_b | A_n | A_h |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for s in &report.sessions {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            s.session,
            s.classes_seen,
            s.n_test,
            one(s.accuracy.mean),
            opt(s.base_accuracy),
            opt(s.novel_accuracy),
            opt(s.harmonic)
        );
    }
    out.push('\n');
    let _ = writeln!(out, "Δ: {delta}");
    let _ = writeln!(
        out,
        "Mean harmonic accuracy: {}",
        report.mean_harmonic.map_or("-".to_string(), one)
    );
    out
}
