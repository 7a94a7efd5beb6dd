//! The grounding agent: caption, concept extraction, detection, refinement,
//! region description and chain-of-thought selection.

pub mod trace;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, ChatRequest, DetectRequest, Detection, Gateway, GatewayError};
use crate::geometry::{self, iou, normalize, ImageDims, NormalizedBox, PixelBox};
use crate::imaging::{ImageError, ImagePayload};
use crate::prompt::templates::{DEFAULT_BOX_FORMAT_LABEL, DEFAULT_VISUAL_PROMPT_NAME};
use crate::prompt::{
    default_noun_examples, render_visual_prompt_image, MainInstance, OtherInstance, PromptError,
    PromptTemplates, VisualPromptSpec,
};

pub use trace::{parse_reasoning_trace, Answer, ParseQuality, ReasoningTrace, DEFAULT_REJECTION_TOKENS};

fn d_min_area() -> f64 {
    geometry::DEFAULT_MIN_AREA_FRACTION
}
fn d_nms() -> f64 {
    geometry::DEFAULT_NMS_IOU
}
fn d_max_primary() -> usize {
    10
}
fn d_one() -> usize {
    1
}
fn d_desc_temp() -> f64 {
    0.7
}
fn d_det_conf() -> f64 {
    0.3
}
fn d_reject() -> Vec<String> {
    DEFAULT_REJECTION_TOKENS.iter().map(|s| s.to_string()).collect()
}
fn d_box_label() -> String {
    DEFAULT_BOX_FORMAT_LABEL.to_string()
}
fn d_vp_name() -> String {
    DEFAULT_VISUAL_PROMPT_NAME.to_string()
}
fn d_nouns() -> Vec<String> {
    default_noun_examples()
}

/// Which concept-extraction prompt to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptPrompt {
    /// Query plus global caption.
    #[default]
    WithCaption,
    /// Query alone.
    QueryOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "d_min_area")]
    pub min_area_fraction: f64,
    #[serde(default = "d_nms")]
    pub nms_iou: f64,
    #[serde(default = "d_max_primary")]
    pub max_primary: usize,
    /// Descriptions sampled per primary candidate before consolidation.
    #[serde(default = "d_one")]
    pub self_consistency_n: usize,
    /// Sampling temperature for self-consistency draws.
    #[serde(default = "d_desc_temp")]
    pub description_temperature: f64,
    /// Passed through to the detector service.
    #[serde(default = "d_det_conf")]
    pub detector_confidence: f64,
    #[serde(default = "d_one")]
    pub max_reprompts: usize,
    #[serde(default = "d_reject")]
    pub rejection_tokens: Vec<String>,
    #[serde(default = "d_box_label")]
    pub box_format_label: String,
    #[serde(default = "d_vp_name")]
    pub visual_prompt_name: String,
    #[serde(default)]
    pub visual_prompt: VisualPromptSpec,
    #[serde(default = "d_nouns")]
    pub noun_examples: Vec<String>,
    #[serde(default)]
    pub concept_prompt: ConceptPrompt,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_area_fraction: d_min_area(),
            nms_iou: d_nms(),
            max_primary: d_max_primary(),
            self_consistency_n: 1,
            description_temperature: d_desc_temp(),
            detector_confidence: d_det_conf(),
            max_reprompts: 1,
            rejection_tokens: d_reject(),
            box_format_label: d_box_label(),
            visual_prompt_name: d_vp_name(),
            visual_prompt: VisualPromptSpec::default(),
            noun_examples: d_nouns(),
            concept_prompt: ConceptPrompt::WithCaption,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.min_area_fraction) {
            return Err(format!("min_area_fraction must be in [0, 1), got {}", self.min_area_fraction));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(format!("nms_iou must be in (0, 1], got {}", self.nms_iou));
        }
        if self.max_primary == 0 {
            return Err("max_primary must be >= 1".into());
        }
        if self.self_consistency_n == 0 {
            return Err("self_consistency_n must be >= 1".into());
        }
        if self.self_consistency_n > 1 && !(self.description_temperature > 0.0) {
            return Err("description_temperature must be > 0 when self_consistency_n > 1".into());
        }
        if !(0.0..=1.0).contains(&self.detector_confidence) {
            return Err(format!("detector_confidence must be in [0, 1], got {}", self.detector_confidence));
        }
        if self.rejection_tokens.iter().any(|t| t.trim().is_empty()) {
            return Err("rejection_tokens must not contain empty strings".into());
        }
        self.visual_prompt.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Caption,
    Concepts,
    Detection,
    Description,
    Aggregation,
    Selection,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Caption => "caption",
            Stage::Concepts => "concepts",
            Stage::Detection => "detection",
            Stage::Description => "description",
            Stage::Aggregation => "aggregation",
            Stage::Selection => "selection",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage: {source}")]
    Model {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("description stage, candidate {index}: {source}")]
    Candidate {
        index: usize,
        #[source]
        source: GatewayError,
    },
    #[error("caption stage: model returned an empty caption")]
    EmptyCaption,
    #[error("concepts stage: no concept could be parsed from {0:?}")]
    EmptyConcepts(String),
    #[error("refinement: no candidate survived")]
    EmptyCandidates,
    #[error("selection stage: reply unparseable after {attempts} attempt(s): {raw:?}")]
    SelectionFailure { attempts: usize, raw: String },
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("image: {0}")]
    Image(#[from] ImageError),
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Model { stage, .. } => stage.as_str(),
            PipelineError::Candidate { .. } => "description",
            PipelineError::EmptyCaption => "caption",
            PipelineError::EmptyConcepts(_) => "concepts",
            PipelineError::EmptyCandidates => "refinement",
            PipelineError::SelectionFailure { .. } => "selection",
            PipelineError::Prompt(_) => "prompt",
            PipelineError::Image(_) => "input",
        }
    }
}

fn tagged(stage: Stage) -> impl Fn(GatewayError) -> PipelineError {
    move |source| PipelineError::Model { stage, source }
}

/// Ordered, unique, lowercase concept names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptSet(Vec<String>);

impl ConceptSet {
    /// Splits a comma-separated reply, trimming whitespace, quotes and
    /// sentence punctuation, lowercasing, and dropping empties and repeats.
    pub fn parse(reply: &str) -> Self {
        let mut out: Vec<String> = Vec::new();
        for raw in reply.split([',', '\n', ';']) {
            let t = raw
                .trim()
                .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .to_lowercase();
            if !t.is_empty() && !out.contains(&t) {
                out.push(t);
            }
        }
        ConceptSet(out)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Primary,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// 1-based, as shown in the selection prompt.
    pub index: usize,
    pub concept: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub norm_box: NormalizedBox,
    pub tier: Tier,
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub image_dims: ImageDims,
    pub global_caption: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn get(&self, index: usize) -> Option<&Candidate> {
        index.checked_sub(1).and_then(|i| self.candidates.get(i))
    }

    pub fn primaries(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.tier == Tier::Primary)
    }
}

/// Filter by area, suppress near-duplicates, sort by area, and split into
/// described (primary) and coordinate-only (other) tiers.
pub fn refine(raw: &[Detection], dims: ImageDims, cfg: &PipelineConfig) -> Vec<Candidate> {
    let kept = geometry::filter_by_area_with(raw, dims, cfg.min_area_fraction, |d| &d.bbox);
    let survivors = geometry::nms_with(&kept, cfg.nms_iou, |d| &d.bbox);
    survivors
        .into_iter()
        .enumerate()
        .map(|(i, d)| Candidate {
            index: i + 1,
            norm_box: normalize(&d.bbox, dims),
            bbox: d.bbox,
            concept: d.concept,
            tier: if i < cfg.max_primary { Tier::Primary } else { Tier::Other },
            description: None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    /// The selector found no matching candidate.
    Selector,
    /// Concept extraction produced nothing.
    NoConcepts,
    /// Nothing survived detection and refinement.
    NoCandidates,
}

impl RejectionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectionReason::Selector => "selector",
            RejectionReason::NoConcepts => "no_concepts",
            RejectionReason::NoCandidates => "no_candidates",
        }
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub caption: f64,
    pub concepts: f64,
    pub detection: f64,
    pub refinement: f64,
    pub description: f64,
    pub selection: f64,
    pub total: f64,
}

impl StageTimings {
    pub const NAMES: [&'static str; 7] = [
        "caption",
        "concepts",
        "detection",
        "refinement",
        "description",
        "selection",
        "total",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.caption,
            self.concepts,
            self.detection,
            self.refinement,
            self.description,
            self.selection,
            self.total,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub predicted_box: Option<PixelBox>,
    pub rejected: bool,
    pub rejection_reason: Option<RejectionReason>,
    pub concepts: ConceptSet,
    pub trace: ReasoningTrace,
    pub candidate_set: CandidateSet,
    pub timings: StageTimings,
    /// Selection calls made, including re-prompts.
    pub selection_attempts: usize,
}

impl GroundingResult {
    pub fn predicted_candidate(&self) -> Option<&Candidate> {
        self.trace.index().and_then(|k| self.candidate_set.get(k))
    }
}

/// Where primary-candidate descriptions come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DescriptionSource<'a> {
    /// The multimodal describer.
    Model,
    /// The candidate best matching `gt` (IoU >= 0.5) is described by the query
    /// itself; the others still go to the describer.
    QueryEcho { gt: Option<&'a PixelBox> },
    /// As `QueryEcho`, with the global caption appended to the query.
    QueryPlus { gt: Option<&'a PixelBox> },
}

pub struct GroundingAgent {
    gateway: Gateway,
    cfg: PipelineConfig,
    templates: PromptTemplates,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

impl GroundingAgent {
    pub fn new(gateway: Gateway, cfg: PipelineConfig, templates: PromptTemplates) -> Self {
        Self {
            gateway,
            cfg,
            templates,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn generate_global_caption(&self, image: &ImagePayload) -> Result<String, PipelineError> {
        let req = self.templates.global_caption().with_image(image.clone()).request();
        let caption = self.gateway.mllm_complete(&req).map_err(tagged(Stage::Caption))?;
        if caption.trim().is_empty() {
            return Err(PipelineError::EmptyCaption);
        }
        Ok(caption)
    }

    pub fn extract_concepts(&self, query: &str, caption: &str) -> Result<ConceptSet, PipelineError> {
        let bundle = match self.cfg.concept_prompt {
            ConceptPrompt::WithCaption => self
                .templates
                .concept_extraction(query, caption, &self.cfg.noun_examples)?,
            ConceptPrompt::QueryOnly => self
                .templates
                .concept_extraction_query_only(query, &self.cfg.noun_examples)?,
        };
        let reply = self
            .gateway
            .llm_complete(&bundle.request())
            .map_err(tagged(Stage::Concepts))?;
        let set = ConceptSet::parse(&reply);
        if set.is_empty() {
            return Err(PipelineError::EmptyConcepts(reply));
        }
        Ok(set)
    }

    /// One detector call per concept at `confidence`; the union in concept order.
    pub fn detect_union(
        &self,
        image: &ImagePayload,
        concepts: &ConceptSet,
        confidence: f64,
    ) -> Result<Vec<Detection>, PipelineError> {
        let per_concept: Vec<Vec<Detection>> = concepts
            .as_slice()
            .par_iter()
            .map(|c| {
                self.gateway.detect(&DetectRequest {
                    image: image.clone(),
                    vocabulary: vec![c.clone()],
                    confidence_threshold: confidence,
                })
            })
            .collect::<Result<_, _>>()
            .map_err(tagged(Stage::Detection))?;
        Ok(per_concept.into_iter().flatten().collect())
    }

    pub fn generate_candidates(
        &self,
        image: &ImagePayload,
        concepts: &ConceptSet,
        caption: &str,
    ) -> Result<CandidateSet, PipelineError> {
        let raw = self.detect_union(image, concepts, self.cfg.detector_confidence)?;
        let candidates = refine(&raw, image.dims(), &self.cfg);
        if candidates.is_empty() {
            return Err(PipelineError::EmptyCandidates);
        }
        Ok(CandidateSet {
            image_dims: image.dims(),
            global_caption: caption.to_string(),
            candidates,
        })
    }

    fn description_request(
        &self,
        marked: &ImagePayload,
        candidate: &Candidate,
    ) -> Result<ChatRequest, PipelineError> {
        Ok(self
            .templates
            .instance_description(
                &candidate.concept,
                &candidate.norm_box,
                &self.cfg.box_format_label,
                &self.cfg.visual_prompt_name,
            )?
            .with_image(marked.clone())
            .request())
    }

    /// A single description of `candidate` from the multimodal model.
    pub fn describe_candidate(
        &self,
        image: &ImagePayload,
        candidate: &Candidate,
    ) -> Result<String, PipelineError> {
        let marked = render_visual_prompt_image(image, &candidate.bbox, &self.cfg.visual_prompt)?;
        let req = self.description_request(&marked, candidate)?;
        self.gateway
            .mllm_complete(&req)
            .map_err(|source| PipelineError::Candidate {
                index: candidate.index,
                source,
            })
    }

    /// `n` sampled descriptions consolidated by the text model; `n = 1` is a
    /// single plain call.
    pub fn describe_with_self_consistency(
        &self,
        image: &ImagePayload,
        candidate: &Candidate,
        n: usize,
    ) -> Result<String, PipelineError> {
        if n <= 1 {
            return self.describe_candidate(image, candidate);
        }
        let marked = render_visual_prompt_image(image, &candidate.bbox, &self.cfg.visual_prompt)?;
        let base = self.description_request(&marked, candidate)?;
        let samples: Vec<String> = (0..n as u32)
            .into_par_iter()
            .map(|i| {
                let req = base.clone().with_sampling(self.cfg.description_temperature, i);
                self.gateway
                    .mllm_complete(&req)
                    .map_err(|source| PipelineError::Candidate {
                        index: candidate.index,
                        source,
                    })
            })
            .collect::<Result<_, _>>()?;
        let agg = self.templates.aggregation(&samples)?;
        self.gateway
            .llm_complete(&agg.request())
            .map_err(tagged(Stage::Aggregation))
    }

    /// Fills in descriptions of every primary candidate.
    pub fn describe_all(
        &self,
        image: &ImagePayload,
        set: &mut CandidateSet,
        query: &str,
        source: DescriptionSource<'_>,
    ) -> Result<(), PipelineError> {
        let (gt, plus) = match source {
            DescriptionSource::Model => (None, false),
            DescriptionSource::QueryEcho { gt } => (gt, false),
            DescriptionSource::QueryPlus { gt } => (gt, true),
        };
        let substituted = gt.and_then(|g| best_match(&set.candidates, g));
        let caption = set.global_caption.clone();
        let n = self.cfg.self_consistency_n;
        let descriptions: Vec<Option<String>> = set
            .candidates
            .par_iter()
            .map(|c| {
                if c.tier != Tier::Primary {
                    return Ok(None);
                }
                if substituted == Some(c.index) {
                    return Ok(Some(if plus {
                        format!("{query} {caption}")
                    } else {
                        query.to_string()
                    }));
                }
                self.describe_with_self_consistency(image, c, n).map(Some)
            })
            .collect::<Result<_, _>>()?;
        for (c, d) in set.candidates.iter_mut().zip(descriptions) {
            c.description = d;
        }
        Ok(())
    }

    /// Runs the selection prompt, re-prompting on unparseable replies.
    /// Returns the trace and the number of calls made.
    pub fn select_candidate(
        &self,
        query: &str,
        set: &CandidateSet,
    ) -> Result<(ReasoningTrace, usize), PipelineError> {
        let main: Vec<MainInstance<'_>> = set
            .candidates
            .iter()
            .filter_map(|c| {
                c.description.as_deref().map(|d| MainInstance {
                    index: c.index,
                    concept: &c.concept,
                    bbox: c.norm_box,
                    description: d,
                })
            })
            .collect();
        let other: Vec<OtherInstance<'_>> = set
            .candidates
            .iter()
            .filter(|c| c.description.is_none())
            .map(|c| OtherInstance {
                index: c.index,
                concept: &c.concept,
                bbox: c.norm_box,
            })
            .collect();
        let bundle = self.templates.selection(
            query,
            &set.global_caption,
            &main,
            &other,
            &self.cfg.box_format_label,
        )?;
        let n = set.candidates.len();
        let mut messages = bundle.messages();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let raw = self
                .gateway
                .llm_complete(&ChatRequest::new(messages.clone()))
                .map_err(tagged(Stage::Selection))?;
            let trace = parse_reasoning_trace(&raw, n, &self.cfg.rejection_tokens);
            if trace.parse_quality != ParseQuality::Unparseable {
                return Ok((trace, attempts));
            }
            if attempts > self.cfg.max_reprompts {
                return Err(PipelineError::SelectionFailure { attempts, raw });
            }
            log::warn!("unparseable selection reply, re-prompting: {raw:?}");
            messages.push(ChatMessage::assistant(raw));
            messages.push(ChatMessage::user(self.templates.selection_reprompt(n)?));
        }
    }

    pub fn ground(&self, image: &ImagePayload, query: &str) -> Result<GroundingResult, PipelineError> {
        self.ground_with(image, query, DescriptionSource::Model)
    }

    pub fn ground_with(
        &self,
        image: &ImagePayload,
        query: &str,
        source: DescriptionSource<'_>,
    ) -> Result<GroundingResult, PipelineError> {
        let start = Instant::now();
        let mut timings = StageTimings::default();
        let dims = image.dims();

        let t = Instant::now();
        let caption = self.generate_global_caption(image)?;
        timings.caption = secs(t);

        let empty_set = |caption: &str| CandidateSet {
            image_dims: dims,
            global_caption: caption.to_string(),
            candidates: Vec::new(),
        };
        let rejected = |reason, concepts, set, mut timings: StageTimings| {
            timings.total = secs(start);
            GroundingResult {
                predicted_box: None,
                rejected: true,
                rejection_reason: Some(reason),
                concepts,
                trace: ReasoningTrace::rejected_without_call(),
                candidate_set: set,
                timings,
                selection_attempts: 0,
            }
        };

        let t = Instant::now();
        let concepts = match self.extract_concepts(query, &caption) {
            Ok(c) => c,
            Err(PipelineError::EmptyConcepts(reply)) => {
                log::info!("no concepts in reply {reply:?}; rejecting");
                timings.concepts = secs(t);
                return Ok(rejected(RejectionReason::NoConcepts, ConceptSet::default(), empty_set(&caption), timings));
            }
            Err(e) => return Err(e),
        };
        timings.concepts = secs(t);

        let t = Instant::now();
        let raw = self.detect_union(image, &concepts, self.cfg.detector_confidence)?;
        timings.detection = secs(t);

        let t = Instant::now();
        let candidates = refine(&raw, dims, &self.cfg);
        timings.refinement = secs(t);
        if candidates.is_empty() {
            return Ok(rejected(RejectionReason::NoCandidates, concepts, empty_set(&caption), timings));
        }
        let mut set = CandidateSet {
            image_dims: dims,
            global_caption: caption,
            candidates,
        };

        let t = Instant::now();
        self.describe_all(image, &mut set, query, source)?;
        timings.description = secs(t);

        let t = Instant::now();
        let (trace, attempts) = self.select_candidate(query, &set)?;
        timings.selection = secs(t);
        timings.total = secs(start);

        let predicted_box = trace.index().and_then(|k| set.get(k)).map(|c| c.bbox);
        let is_rejected = predicted_box.is_none();
        Ok(GroundingResult {
            predicted_box,
            rejected: is_rejected,
            rejection_reason: is_rejected.then_some(RejectionReason::Selector),
            concepts,
            trace,
            candidate_set: set,
            timings,
            selection_attempts: attempts,
        })
    }
}

/// Index of the primary candidate overlapping `gt` best, if at IoU >= 0.5.
fn best_match(candidates: &[Candidate], gt: &PixelBox) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for c in candidates {
        let v = iou(&c.bbox, gt);
        if v >= 0.5 && best.is_none_or(|(b, _)| v > b) {
            best = Some((v, c.index));
        }
    }
    best.and_then(|(_, idx)| {
        (candidates[idx - 1].tier == Tier::Primary).then_some(idx)
    })
}
