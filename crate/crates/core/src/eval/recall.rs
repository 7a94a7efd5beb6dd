//! Candidate-generation recall under three box-selection conditions, swept
//! over the detector threshold or a cap on the number of boxes.

use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::{EvalError, LoadedRecord};
use crate::gateway::Detection;
use crate::geometry::{self, iou, PixelBox};
use crate::imaging::ImagePayload;
use crate::pipeline::{refine, GroundingAgent, PipelineError};

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// Detector pass-through thresholds.
    Confidence(Vec<f64>),
    /// Keep at most this many boxes (largest first) per condition.
    MaxBoxes(Vec<usize>),
}

impl Sweep {
    pub fn kind(&self) -> &'static str {
        match self {
            Sweep::Confidence(_) => "confidence",
            Sweep::MaxBoxes(_) => "max_boxes",
        }
    }

    fn len(&self) -> usize {
        match self {
            Sweep::Confidence(v) => v.len(),
            Sweep::MaxBoxes(v) => v.len(),
        }
    }
}

impl FromStr for Sweep {
    type Err = String;

    /// `confidence=0.1,0.3,0.5` or `max_boxes=5,10,20`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, values) = s
            .split_once('=')
            .ok_or_else(|| format!("sweep {s:?} must look like confidence=0.1,0.3 or max_boxes=5,10"))?;
        let parts: Vec<&str> = values.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        if parts.is_empty() {
            return Err(format!("sweep {s:?} has no values"));
        }
        match kind.trim() {
            "confidence" => {
                let v: Vec<f64> = parts
                    .iter()
                    .map(|p| p.parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
                    .collect::<Result<_, _>>()?;
                if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err("confidence values must be in [0, 1]".into());
                }
                Ok(Sweep::Confidence(v))
            }
            "max_boxes" => {
                let v: Vec<usize> = parts
                    .iter()
                    .map(|p| p.parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
                    .collect::<Result<_, _>>()?;
                if v.contains(&0) {
                    return Err("max_boxes values must be >= 1".into());
                }
                Ok(Sweep::MaxBoxes(v))
            }
            other => Err(format!("unknown sweep kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Raw union of all detections.
    PreNms,
    /// Non-maximum suppression over the raw union.
    PostNms,
    /// Area filter, then suppression.
    Major,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::PreNms, Condition::PostNms, Condition::Major];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::PreNms => "pre_nms",
            Condition::PostNms => "post_nms",
            Condition::Major => "major",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub sweep: &'static str,
    pub value: f64,
    pub condition: Condition,
    pub n_samples: usize,
    pub n_hits: usize,
    pub mean_boxes: f64,
    pub recall: f64,
}

fn boxes_for(cond: Condition, raw: &[Detection], agent: &GroundingAgent, dims: crate::geometry::ImageDims) -> Vec<PixelBox> {
    match cond {
        Condition::PreNms => geometry::sort_by_area_desc(&raw.iter().map(|d| d.bbox).collect::<Vec<_>>()),
        Condition::PostNms => geometry::nms_with(raw, agent.config().nms_iou, |d| &d.bbox)
            .into_iter()
            .map(|d| d.bbox)
            .collect(),
        Condition::Major => refine(raw, dims, agent.config()).into_iter().map(|c| c.bbox).collect(),
    }
}

/// Per sweep point and condition: (boxes kept, whether the ground truth is hit).
type SampleCurve = Vec<[(usize, bool); 3]>;

fn sample_curve(
    agent: &GroundingAgent,
    record: &LoadedRecord,
    gt: &PixelBox,
    sweep: &Sweep,
    recall_iou: f64,
) -> Result<SampleCurve, EvalError> {
    let image = ImagePayload::load(&record.image).map_err(PipelineError::from)?;
    let dims = image.dims();
    let caption = agent.generate_global_caption(&image)?;
    let concepts = match agent.extract_concepts(&record.query, &caption) {
        Ok(c) => c,
        Err(PipelineError::EmptyConcepts(_)) => return Ok(vec![[(0, false); 3]; sweep.len()]),
        Err(e) => return Err(e.into()),
    };
    let score = |boxes: &[PixelBox]| (boxes.len(), boxes.iter().any(|b| iou(b, gt) >= recall_iou));
    let point = |raw: &[Detection], cap: Option<usize>| {
        Condition::ALL.map(|c| {
            let mut boxes = boxes_for(c, raw, agent, dims);
            if let Some(k) = cap {
                boxes.truncate(k);
            }
            score(&boxes)
        })
    };
    Ok(match sweep {
        Sweep::Confidence(values) => values
            .iter()
            .map(|&v| Ok(point(&agent.detect_union(&image, &concepts, v)?, None)))
            .collect::<Result<_, PipelineError>>()?,
        Sweep::MaxBoxes(values) => {
            let raw = agent.detect_union(&image, &concepts, agent.config().detector_confidence)?;
            values.iter().map(|&k| point(&raw, Some(k))).collect()
        }
    })
}

/// One row per sweep point per condition, over records that have a target.
pub fn recall_curve(
    agent: &GroundingAgent,
    records: &[LoadedRecord],
    sweep: &Sweep,
    recall_iou: f64,
) -> Result<Vec<RecallRow>, EvalError> {
    let targeted: Vec<(&LoadedRecord, &PixelBox)> = records
        .iter()
        .filter_map(|r| r.gt_box.as_ref().map(|g| (r, g)))
        .collect();
    if targeted.is_empty() {
        return Err(EvalError::Invalid("no records with a ground-truth box".into()));
    }
    let curves: Vec<SampleCurve> = targeted
        .par_iter()
        .map(|(r, g)| sample_curve(agent, r, g, sweep, recall_iou))
        .collect::<Result<_, _>>()?;
    let n = targeted.len();
    let values: Vec<f64> = match sweep {
        Sweep::Confidence(v) => v.clone(),
        Sweep::MaxBoxes(v) => v.iter().map(|&k| k as f64).collect(),
    };
    let mut rows = Vec::new();
    for (pi, value) in values.iter().enumerate() {
        for (ci, condition) in Condition::ALL.iter().enumerate() {
            let boxes: usize = curves.iter().map(|c| c[pi][ci].0).sum();
            let hits = curves.iter().filter(|c| c[pi][ci].1).count();
            rows.push(RecallRow {
                sweep: sweep.kind(),
                value: *value,
                condition: *condition,
                n_samples: n,
                n_hits: hits,
                mean_boxes: boxes as f64 / n as f64,
                recall: hits as f64 / n as f64,
            });
        }
    }
    Ok(rows)
}

pub fn recall_csv(rows: &[RecallRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sweep", "value", "condition", "n_samples", "n_hits", "mean_boxes", "recall"])?;
    for r in rows {
        w.write_record([
            r.sweep.to_string(),
            r.value.to_string(),
            r.condition.as_str().to_string(),
            r.n_samples.to_string(),
            r.n_hits.to_string(),
            r.mean_boxes.to_string(),
            r.recall.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
