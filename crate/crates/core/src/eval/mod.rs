//! Evaluation: per-sample judging, metric aggregation, reports, recall curves
//! and the dataset runner.

pub mod coco;
pub mod dataset;
pub mod recall;
pub mod report;
pub mod runner;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, PixelBox};
use crate::pipeline::{GroundingResult, ParseQuality, PipelineError, RejectionReason, StageTimings};

pub use dataset::{load_dataset, DatasetRecord, LoadedRecord};

/// Default IoU a candidate must reach to count towards generation recall.
pub const DEFAULT_RECALL_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no outcomes to aggregate for split {0:?}")]
    EmptySplit(String),
    #[error("inconsistent outcomes: {0}")]
    Inconsistent(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Invalid(String),
}

/// How primary-candidate descriptions are produced during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Caption,
    QueryEcho,
    QueryPlus,
}

impl AblationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::Caption => "caption",
            AblationMode::QueryEcho => "query_echo",
            AblationMode::QueryPlus => "query_plus",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "caption" => Ok(AblationMode::Caption),
            "query_echo" => Ok(AblationMode::QueryEcho),
            "query_plus" => Ok(AblationMode::QueryPlus),
            other => Err(format!("unknown mode {other:?} (caption|query_echo|query_plus)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub split: String,
    pub query: String,
    pub gt_box: Option<PixelBox>,
    pub predicted_box: Option<PixelBox>,
    pub rejected: bool,
    pub rejection_reason: Option<RejectionReason>,
    pub iou_with_gt: f64,
    pub hit_at_05: bool,
    pub generation_recall_hit: bool,
    pub n_candidates: usize,
    pub n_primary: usize,
    pub n_reasoning_steps: usize,
    pub parse_quality: Option<ParseQuality>,
    pub selection_attempts: usize,
    /// Set when the pipeline failed on this sample; counts as a miss.
    pub error: Option<String>,
    pub trace_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

/// Scores one grounding result against its record.
pub fn judge_sample(result: &GroundingResult, record: &DatasetRecord, recall_iou: f64) -> SampleOutcome {
    let iou_with_gt = match (&result.predicted_box, &record.gt_box) {
        (Some(p), Some(g)) if !result.rejected => iou(p, g),
        _ => 0.0,
    };
    let generation_recall_hit = record.gt_box.as_ref().is_some_and(|g| {
        result
            .candidate_set
            .candidates
            .iter()
            .any(|c| iou(&c.bbox, g) >= recall_iou)
    });
    let called = result.selection_attempts > 0;
    SampleOutcome {
        sample_id: record.sample_id.clone(),
        split: record.split.clone(),
        query: record.query.clone(),
        gt_box: record.gt_box,
        predicted_box: result.predicted_box,
        rejected: result.rejected,
        rejection_reason: result.rejection_reason,
        iou_with_gt,
        hit_at_05: !result.rejected && iou_with_gt > 0.5,
        generation_recall_hit,
        n_candidates: result.candidate_set.candidates.len(),
        n_primary: result.candidate_set.primaries().count(),
        n_reasoning_steps: result.trace.steps.len(),
        parse_quality: called.then_some(result.trace.parse_quality),
        selection_attempts: result.selection_attempts,
        error: None,
        trace_text: result.trace.raw_text.clone(),
        timings: Some(result.timings),
    }
}

/// Outcome for a sample whose pipeline run failed.
pub fn failed_sample(record: &DatasetRecord, error: &str) -> SampleOutcome {
    SampleOutcome {
        sample_id: record.sample_id.clone(),
        split: record.split.clone(),
        query: record.query.clone(),
        gt_box: record.gt_box,
        predicted_box: None,
        rejected: false,
        rejection_reason: None,
        iou_with_gt: 0.0,
        hit_at_05: false,
        generation_recall_hit: false,
        n_candidates: 0,
        n_primary: 0,
        n_reasoning_steps: 0,
        parse_quality: None,
        selection_attempts: 0,
        error: Some(error.to_string()),
        trace_text: String::new(),
        timings: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub mode: AblationMode,
    pub n_samples: usize,
    pub n_hits: usize,
    pub accuracy: f64,
    pub n_recall_hits: usize,
    pub generation_recall: f64,
    pub n_rejected: usize,
    pub rejection_rate: f64,
    /// Mean over samples that reached the selection call.
    pub mean_reasoning_steps: f64,
    pub n_errors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_timings: Option<StageTimings>,
}

/// Order-independent sum: values are sorted before adding.
fn stable_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregates one split's outcomes. Per-stage timing means are included only
/// when every outcome carries timings.
pub fn aggregate(outcomes: &[SampleOutcome], split: &str, mode: AblationMode) -> Result<MetricsReport, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptySplit(split.to_string()));
    }
    let n = outcomes.len();
    let mut n_hits = 0;
    let mut n_recall = 0;
    let mut n_rejected = 0;
    let mut n_errors = 0;
    let mut step_total = 0usize;
    let mut step_count = 0usize;
    for o in outcomes {
        if o.hit_at_05 != (!o.rejected && o.iou_with_gt > 0.5) {
            return Err(EvalError::Inconsistent(format!("{}: hit flag disagrees with IoU", o.sample_id)));
        }
        if o.hit_at_05 && !o.generation_recall_hit {
            return Err(EvalError::Inconsistent(format!(
                "{}: hit without a recallable candidate",
                o.sample_id
            )));
        }
        n_hits += o.hit_at_05 as usize;
        n_recall += o.generation_recall_hit as usize;
        n_rejected += o.rejected as usize;
        n_errors += o.error.is_some() as usize;
        if o.selection_attempts > 0 {
            step_total += o.n_reasoning_steps;
            step_count += 1;
        }
    }
    let mean_timings = if outcomes.iter().all(|o| o.timings.is_some()) {
        let col = |f: fn(&StageTimings) -> f64| stable_mean(outcomes.iter().map(|o| f(o.timings.as_ref().unwrap())).collect());
        Some(StageTimings {
            caption: col(|t| t.caption),
            concepts: col(|t| t.concepts),
            detection: col(|t| t.detection),
            refinement: col(|t| t.refinement),
            description: col(|t| t.description),
            selection: col(|t| t.selection),
            total: col(|t| t.total),
        })
    } else {
        None
    };
    Ok(MetricsReport {
        split: split.to_string(),
        mode,
        n_samples: n,
        n_hits,
        accuracy: n_hits as f64 / n as f64,
        n_recall_hits: n_recall,
        generation_recall: n_recall as f64 / n as f64,
        n_rejected,
        rejection_rate: n_rejected as f64 / n as f64,
        mean_reasoning_steps: if step_count == 0 {
            0.0
        } else {
            step_total as f64 / step_count as f64
        },
        n_errors,
        mean_timings,
    })
}
