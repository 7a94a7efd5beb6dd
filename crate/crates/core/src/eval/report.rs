//! Report files. JSONL holds a summary object followed by one object per
//! outcome; CSV holds the same data in one flat table whose first row is the
//! summary.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AblationMode, EvalError, MetricsReport, SampleOutcome};
use crate::geometry::PixelBox;
use crate::pipeline::{ParseQuality, RejectionReason, StageTimings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Jsonl,
    Csv,
}

impl ReportFormat {
    /// CSV for a `.csv` extension, JSONL otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum JsonLine {
    Summary(MetricsReport),
    Outcome(SampleOutcome),
}

fn io(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_report(
    report: &MetricsReport,
    outcomes: &[SampleOutcome],
    path: &Path,
    format: ReportFormat,
) -> Result<(), EvalError> {
    let bytes = match format {
        ReportFormat::Jsonl => to_jsonl(report, outcomes),
        ReportFormat::Csv => to_csv(report, outcomes).map_err(|e| io(path, e))?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io(path, e))?;
    f.write_all(&bytes).map_err(|e| io(path, e))
}

pub fn load_report(path: &Path) -> Result<(MetricsReport, Vec<SampleOutcome>), EvalError> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    match ReportFormat::from_path(path) {
        ReportFormat::Jsonl => from_jsonl(&text, path),
        ReportFormat::Csv => from_csv(&text, path),
    }
}

pub fn to_jsonl(report: &MetricsReport, outcomes: &[SampleOutcome]) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&JsonLine::Summary(report.clone())).expect("serializable"));
    out.push('\n');
    for o in outcomes {
        out.push_str(&serde_json::to_string(&JsonLine::Outcome(o.clone())).expect("serializable"));
        out.push('\n');
    }
    out.into_bytes()
}

fn from_jsonl(text: &str, path: &Path) -> Result<(MetricsReport, Vec<SampleOutcome>), EvalError> {
    let mut summary = None;
    let mut outcomes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonLine = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            JsonLine::Summary(s) if summary.is_none() && outcomes.is_empty() => summary = Some(s),
            JsonLine::Summary(_) => {
                return Err(EvalError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: "summary must be the first and only summary line".into(),
                })
            }
            JsonLine::Outcome(o) => outcomes.push(o),
        }
    }
    let summary = summary.ok_or_else(|| io(path, "report has no summary line"))?;
    Ok((summary, outcomes))
}

/// One CSV row; summary-only and outcome-only columns are empty on the other
/// row kind.
#[derive(Debug, Default, Serialize, Deserialize)]
struct CsvRow {
    kind: String,
    split: String,
    mode: Option<String>,
    sample_id: Option<String>,
    query: Option<String>,
    gt_box: Option<String>,
    predicted_box: Option<String>,
    rejected: Option<bool>,
    rejection_reason: Option<String>,
    iou_with_gt: Option<f64>,
    hit_at_05: Option<bool>,
    generation_recall_hit: Option<bool>,
    n_candidates: Option<usize>,
    n_primary: Option<usize>,
    n_reasoning_steps: Option<usize>,
    parse_quality: Option<String>,
    selection_attempts: Option<usize>,
    error: Option<String>,
    trace_text: Option<String>,
    n_samples: Option<usize>,
    n_hits: Option<usize>,
    accuracy: Option<f64>,
    n_recall_hits: Option<usize>,
    generation_recall: Option<f64>,
    n_rejected: Option<usize>,
    rejection_rate: Option<f64>,
    mean_reasoning_steps: Option<f64>,
    n_errors: Option<usize>,
    t_caption: Option<f64>,
    t_concepts: Option<f64>,
    t_detection: Option<f64>,
    t_refinement: Option<f64>,
    t_description: Option<f64>,
    t_selection: Option<f64>,
    t_total: Option<f64>,
}

fn enum_text<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("serializable") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

fn enum_parse<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn box_text(b: &Option<PixelBox>) -> Option<String> {
    b.map(|b| serde_json::to_string(&b).expect("serializable"))
}

fn box_parse(s: &Option<String>) -> Result<Option<PixelBox>, String> {
    s.as_deref()
        .map(|t| serde_json::from_str(t).map_err(|e| e.to_string()))
        .transpose()
}

impl CsvRow {
    fn set_timings(&mut self, t: &Option<StageTimings>) {
        if let Some(t) = t {
            self.t_caption = Some(t.caption);
            self.t_concepts = Some(t.concepts);
            self.t_detection = Some(t.detection);
            self.t_refinement = Some(t.refinement);
            self.t_description = Some(t.description);
            self.t_selection = Some(t.selection);
            self.t_total = Some(t.total);
        }
    }

    fn timings(&self) -> Option<StageTimings> {
        Some(StageTimings {
            caption: self.t_caption?,
            concepts: self.t_concepts?,
            detection: self.t_detection?,
            refinement: self.t_refinement?,
            description: self.t_description?,
            selection: self.t_selection?,
            total: self.t_total?,
        })
    }
}

pub fn to_csv(report: &MetricsReport, outcomes: &[SampleOutcome]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = CsvRow {
        kind: "summary".into(),
        split: report.split.clone(),
        mode: Some(report.mode.as_str().into()),
        n_samples: Some(report.n_samples),
        n_hits: Some(report.n_hits),
        accuracy: Some(report.accuracy),
        n_recall_hits: Some(report.n_recall_hits),
        generation_recall: Some(report.generation_recall),
        n_rejected: Some(report.n_rejected),
        rejection_rate: Some(report.rejection_rate),
        mean_reasoning_steps: Some(report.mean_reasoning_steps),
        n_errors: Some(report.n_errors),
        ..CsvRow::default()
    };
    head.set_timings(&report.mean_timings);
    w.serialize(head)?;
    for o in outcomes {
        let mut row = CsvRow {
            kind: "outcome".into(),
            split: o.split.clone(),
            sample_id: Some(o.sample_id.clone()),
            query: Some(o.query.clone()),
            gt_box: box_text(&o.gt_box),
            predicted_box: box_text(&o.predicted_box),
            rejected: Some(o.rejected),
            rejection_reason: o.rejection_reason.as_ref().map(enum_text),
            iou_with_gt: Some(o.iou_with_gt),
            hit_at_05: Some(o.hit_at_05),
            generation_recall_hit: Some(o.generation_recall_hit),
            n_candidates: Some(o.n_candidates),
            n_primary: Some(o.n_primary),
            n_reasoning_steps: Some(o.n_reasoning_steps),
            parse_quality: o.parse_quality.as_ref().map(enum_text),
            selection_attempts: Some(o.selection_attempts),
            error: o.error.clone(),
            trace_text: Some(o.trace_text.clone()),
            ..CsvRow::default()
        };
        row.set_timings(&o.timings);
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

fn from_csv(text: &str, path: &Path) -> Result<(MetricsReport, Vec<SampleOutcome>), EvalError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut summary = None;
    let mut outcomes = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        // header is line 1, the summary line 2
        let line = i + 2;
        let bad = |message: String| EvalError::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let need = |name: &str| bad(format!("missing {name}"));
        match row.kind.as_str() {
            "summary" => {
                let mode: AblationMode = row
                    .mode
                    .as_deref()
                    .ok_or_else(|| need("mode"))?
                    .parse()
                    .map_err(bad)?;
                summary = Some(MetricsReport {
                    split: row.split.clone(),
                    mode,
                    n_samples: row.n_samples.ok_or_else(|| need("n_samples"))?,
                    n_hits: row.n_hits.ok_or_else(|| need("n_hits"))?,
                    accuracy: row.accuracy.ok_or_else(|| need("accuracy"))?,
                    n_recall_hits: row.n_recall_hits.ok_or_else(|| need("n_recall_hits"))?,
                    generation_recall: row.generation_recall.ok_or_else(|| need("generation_recall"))?,
                    n_rejected: row.n_rejected.ok_or_else(|| need("n_rejected"))?,
                    rejection_rate: row.rejection_rate.ok_or_else(|| need("rejection_rate"))?,
                    mean_reasoning_steps: row.mean_reasoning_steps.ok_or_else(|| need("mean_reasoning_steps"))?,
                    n_errors: row.n_errors.ok_or_else(|| need("n_errors"))?,
                    mean_timings: row.timings(),
                });
            }
            "outcome" => outcomes.push(SampleOutcome {
                sample_id: row.sample_id.clone().ok_or_else(|| need("sample_id"))?,
                split: row.split.clone(),
                query: row.query.clone().unwrap_or_default(),
                gt_box: box_parse(&row.gt_box).map_err(bad)?,
                predicted_box: box_parse(&row.predicted_box).map_err(bad)?,
                rejected: row.rejected.ok_or_else(|| need("rejected"))?,
                rejection_reason: row
                    .rejection_reason
                    .as_deref()
                    .map(enum_parse::<RejectionReason>)
                    .transpose()
                    .map_err(bad)?,
                iou_with_gt: row.iou_with_gt.ok_or_else(|| need("iou_with_gt"))?,
                hit_at_05: row.hit_at_05.ok_or_else(|| need("hit_at_05"))?,
                generation_recall_hit: row.generation_recall_hit.ok_or_else(|| need("generation_recall_hit"))?,
                n_candidates: row.n_candidates.ok_or_else(|| need("n_candidates"))?,
                n_primary: row.n_primary.ok_or_else(|| need("n_primary"))?,
                n_reasoning_steps: row.n_reasoning_steps.ok_or_else(|| need("n_reasoning_steps"))?,
                parse_quality: row
                    .parse_quality
                    .as_deref()
                    .map(enum_parse::<ParseQuality>)
                    .transpose()
                    .map_err(bad)?,
                selection_attempts: row.selection_attempts.ok_or_else(|| need("selection_attempts"))?,
                error: row.error.clone(),
                trace_text: row.trace_text.clone().unwrap_or_default(),
                timings: row.timings(),
            }),
            other => return Err(bad(format!("unknown row kind {other:?}"))),
        }
    }
    let summary = summary.ok_or_else(|| io(path, "report has no summary row"))?;
    Ok((summary, outcomes))
}
