//! Dataset runs with per-sample checkpointing.
//!
//! Outcomes are appended to `<report>.ckpt.jsonl` as they complete. A resumed
//! run reads that file and skips the samples already in it. The final report
//! lists outcomes in dataset order and the checkpoint is then removed.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use super::report::{write_report, ReportFormat};
use super::{aggregate, failed_sample, judge_sample, AblationMode, EvalError, LoadedRecord, MetricsReport, SampleOutcome};
use crate::imaging::ImagePayload;
use crate::pipeline::{DescriptionSource, GroundingAgent, PipelineError};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub mode: AblationMode,
    pub recall_iou: f64,
    /// Keep per-stage timings in the report. Off by default so that reports
    /// of deterministic runs are byte-identical.
    pub include_timings: bool,
    pub resume: bool,
    /// Stop at the first failing sample instead of recording it as a miss.
    pub fail_fast: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            mode: AblationMode::Caption,
            recall_iou: super::DEFAULT_RECALL_IOU,
            include_timings: false,
            resume: false,
            fail_fast: false,
        }
    }
}

pub fn checkpoint_path(report: &Path) -> PathBuf {
    let mut name = report.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".ckpt.jsonl");
    report.with_file_name(name)
}

fn io(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Outcomes stored in a checkpoint file. A torn final line is ignored.
pub fn read_checkpoint(path: &Path) -> Result<HashMap<String, SampleOutcome>, EvalError> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SampleOutcome>(line) {
            Ok(o) => {
                out.insert(o.sample_id.clone(), o);
            }
            Err(e) if i + 1 == lines.len() => log::warn!("ignoring torn checkpoint line: {e}"),
            Err(e) => {
                return Err(EvalError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Runs one sample through the agent.
pub fn run_sample(agent: &GroundingAgent, record: &LoadedRecord, opts: &BenchOptions) -> Result<SampleOutcome, PipelineError> {
    let image = ImagePayload::load(&record.image)?;
    let gt = record.gt_box.as_ref();
    let source = match opts.mode {
        AblationMode::Caption => DescriptionSource::Model,
        AblationMode::QueryEcho => DescriptionSource::QueryEcho { gt },
        AblationMode::QueryPlus => DescriptionSource::QueryPlus { gt },
    };
    let result = agent.ground_with(&image, &record.query, source)?;
    let mut outcome = judge_sample(&result, record, opts.recall_iou);
    if !opts.include_timings {
        outcome.timings = None;
    }
    Ok(outcome)
}

/// Runs every record, writes the report, and returns it with the outcomes
/// in dataset order.
pub fn run_bench(
    agent: &GroundingAgent,
    records: &[LoadedRecord],
    split: &str,
    report_path: &Path,
    opts: &BenchOptions,
) -> Result<(MetricsReport, Vec<SampleOutcome>), EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptySplit(split.to_string()));
    }
    let ckpt = checkpoint_path(report_path);
    let done = if opts.resume { read_checkpoint(&ckpt)? } else { HashMap::new() };
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(&ckpt, e))?;
    }
    let file: File = if opts.resume {
        OpenOptions::new().create(true).append(true).open(&ckpt)
    } else {
        File::create(&ckpt)
    }
    .map_err(|e| io(&ckpt, e))?;
    let writer = Mutex::new(file);
    if !done.is_empty() {
        log::info!("resuming: {} of {} samples already done", done.len(), records.len());
    }

    let fresh: Vec<Result<Option<SampleOutcome>, EvalError>> = records
        .par_iter()
        .map(|r| {
            if done.contains_key(&r.sample_id) {
                return Ok(None);
            }
            let outcome = match run_sample(agent, r, opts) {
                Ok(o) => o,
                Err(e) if !opts.fail_fast => {
                    log::warn!("sample {} failed: {e}", r.sample_id);
                    failed_sample(r, &format!("{} stage: {e}", e.stage()))
                }
                Err(e) => return Err(EvalError::Invalid(format!("sample {}: {e}", r.sample_id))),
            };
            let line = serde_json::to_string(&outcome).expect("serializable") + "\n";
            let mut f = writer.lock().unwrap();
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| io(&ckpt, e))?;
            Ok(Some(outcome))
        })
        .collect();

    let mut outcomes = Vec::with_capacity(records.len());
    for (r, res) in records.iter().zip(fresh) {
        match res? {
            Some(o) => outcomes.push(o),
            None => {
                let mut o = done[&r.sample_id].clone();
                if !opts.include_timings {
                    o.timings = None;
                }
                outcomes.push(o);
            }
        }
    }
    drop(writer);
    let report = aggregate(&outcomes, split, opts.mode)?;
    write_report(&report, &outcomes, report_path, ReportFormat::from_path(report_path))?;
    fs::remove_file(&ckpt).map_err(|e| io(&ckpt, e))?;
    Ok((report, outcomes))
}

/// Records of `split`, or of the only split present when `split` is `None`.
pub fn select_split(records: Vec<LoadedRecord>, split: Option<&str>) -> Result<(String, Vec<LoadedRecord>), EvalError> {
    let names = super::dataset::splits(&records);
    let chosen = match split {
        Some(s) => s.to_string(),
        None => match names.as_slice() {
            [one] => one.clone(),
            [] => return Err(EvalError::EmptySplit(String::new())),
            many => {
                return Err(EvalError::Invalid(format!(
                    "dataset holds several splits ({}); choose one with --split",
                    many.join(", ")
                )))
            }
        },
    };
    let picked: Vec<LoadedRecord> = records.into_iter().filter(|r| r.split == chosen).collect();
    if picked.is_empty() {
        return Err(EvalError::EmptySplit(chosen));
    }
    Ok((chosen, picked))
}
