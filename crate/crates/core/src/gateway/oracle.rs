//! Deterministic stand-ins for the three model roles, answering from a set of
//! synthetic scene manifests.
//!
//! The oracles recognise which pipeline stage is calling from the prompt
//! itself and answer the way a perfectly attentive model would:
//!
//! * captioning returns the manifest caption of the scene whose raster matches
//!   the image exactly;
//! * concept extraction returns every manifest label (plus synonyms) named in
//!   the query;
//! * detection returns every manifest object answering to a vocabulary term
//!   whose `detector_confidence` clears the pass-through threshold;
//! * region description identifies the outlined object from its untouched
//!   interior pixels and returns its attribute sentence, optionally corrupted
//!   at a fixed rate;
//! * selection picks the candidate whose description covers the most query
//!   content words, rejecting when none covers them all;
//! * aggregation returns the majority description.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ChatBackend, ChatMessage, ChatRequest, ChatRole, DetectRequest, Detection, DetectorBackend,
    GatewayError, RoleKind,
};
use crate::geometry::{denormalize, NormalizedBox, PixelBox};
use crate::scene::{attribute_sentence, SceneManifest, SceneObject, SceneRegistry, PALETTE};

fn default_min_overlap() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Fraction of region descriptions whose color is swapped for a wrong one.
    #[serde(default)]
    pub corruption_rate: f64,
    /// Share of query content words a description must cover to be selectable.
    #[serde(default = "default_min_overlap")]
    pub min_overlap: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            corruption_rate: 0.0,
            min_overlap: default_min_overlap(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(format!("corruption_rate must be in [0, 1], got {}", self.corruption_rate));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap <= 1.0) {
            return Err(format!("min_overlap must be in (0, 1], got {}", self.min_overlap));
        }
        Ok(())
    }
}

/// What the describer oracle returns for a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescribeMode {
    Attributes,
    QueryEcho,
    QueryPlus,
}

/// Description of the manifest object under `bbox`.
pub fn oracle_describe(
    scene: &SceneManifest,
    bbox: &PixelBox,
    mode: DescribeMode,
    query: &str,
) -> Result<String, GatewayError> {
    let obj = scene.best_match(bbox, 0.5).ok_or_else(|| {
        GatewayError::Oracle(format!("no object of {} matches {bbox}", scene.scene_id))
    })?;
    Ok(match mode {
        DescribeMode::Attributes => obj.attribute_sentence.clone(),
        DescribeMode::QueryEcho => query.to_string(),
        DescribeMode::QueryPlus => format!("{query} {}", scene.global_caption),
    })
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "to", "is", "and", "with", "by", "one", "that",
    "this", "which", "it",
];

/// Lowercased alphanumeric words.
pub fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn content_words(s: &str) -> BTreeSet<String> {
    words(s)
        .into_iter()
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Uniform draw in [0, 1) and a second independent word, keyed on the inputs.
fn keyed_draw(parts: &[&str]) -> (f64, u64) {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    let a = u64::from_be_bytes(d[..8].try_into().unwrap());
    let b = u64::from_be_bytes(d[8..16].try_into().unwrap());
    ((a >> 11) as f64 / (1u64 << 53) as f64, b)
}

/// The attribute sentence, or with probability `rate` the same sentence with
/// a different palette color. Keyed on (scene, object, sample) so that
/// self-consistency draws corrupt independently.
pub fn corrupted_sentence(scene: &str, obj: &SceneObject, sample_index: u32, rate: f64) -> String {
    let sample = sample_index.to_string();
    let (u, pick) = keyed_draw(&[scene, &obj.id, &sample]);
    if u >= rate {
        return obj.attribute_sentence.clone();
    }
    let others: Vec<&str> = PALETTE
        .iter()
        .map(|(n, _)| *n)
        .filter(|n| *n != obj.color_name)
        .collect();
    let wrong = others[(pick % others.len() as u64) as usize];
    attribute_sentence(wrong, &obj.label)
}

/// Selection over parsed candidates: exact description match first, then the
/// highest content-word coverage, ties to the lower index.
pub fn oracle_select(query: &str, candidates: &[(usize, Option<String>)], min_overlap: f64) -> String {
    let q_words = words(query);
    let q_content = content_words(query);
    let mut lines = vec![format!(
        "Reasoning Step 1: The query asks for an object matching: {}.",
        q_content.iter().cloned().collect::<Vec<_>>().join(", ")
    )];
    if let Some((idx, _)) = candidates
        .iter()
        .find(|(_, d)| d.as_deref().is_some_and(|d| words(d) == q_words))
    {
        lines.push(format!("Reasoning Step 2: Candidate {idx} is described exactly as the query."));
        lines.push(format!("Answer: {idx}"));
        return lines.join("\n");
    }
    let mut best: Option<(usize, usize)> = None;
    for (idx, desc) in candidates {
        let Some(d) = desc else { continue };
        let overlap = content_words(d).intersection(&q_content).count();
        if best.is_none_or(|(_, b)| overlap > b) {
            best = Some((*idx, overlap));
        }
    }
    let needed = (min_overlap * q_content.len() as f64).ceil() as usize;
    match best {
        Some((idx, overlap)) if overlap >= needed.max(1) => {
            lines.push(format!(
                "Reasoning Step 2: Candidate {idx} covers {overlap} of {} query terms, more than any other.",
                q_content.len()
            ));
            lines.push(format!("Answer: {idx}"));
        }
        _ => {
            lines.push("Reasoning Step 2: No described candidate covers the query terms.".into());
            lines.push("Answer: none".into());
        }
    }
    lines.join("\n")
}

/// Most frequent description (whitespace-normalized), ties to the earliest.
pub fn majority(descriptions: &[String]) -> Option<String> {
    let norm: Vec<String> = descriptions
        .iter()
        .map(|d| d.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect();
    let mut best: Option<(usize, &String)> = None;
    for (i, d) in norm.iter().enumerate() {
        if norm[..i].contains(d) {
            continue;
        }
        let count = norm.iter().filter(|x| *x == d).count();
        if best.is_none_or(|(b, _)| count > b) {
            best = Some((count, d));
        }
    }
    best.map(|(_, d)| d.clone())
}

/// Concept reply listing every label named in `query` followed by its synonyms.
pub fn oracle_concepts(registry: &SceneRegistry, query: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    for w in words(query) {
        if let Some(label) = registry.canonical_label(&w) {
            for name in std::iter::once(label.to_string()).chain(registry.synonyms_of(label).iter().cloned()) {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
    }
    out.join(", ")
}

fn system_text(req: &ChatRequest) -> &str {
    req.messages
        .iter()
        .find(|m| m.role == ChatRole::System)
        .map(|m| m.text.as_str())
        .unwrap_or("")
}

fn first_user(req: &ChatRequest) -> Option<&ChatMessage> {
    req.messages.iter().find(|m| m.role == ChatRole::User)
}

fn unrecognized(role: RoleKind) -> GatewayError {
    GatewayError::Oracle(format!("unrecognized {role} prompt"))
}

/// Parses `"{idx}. {concept}[..]"` entries and their description lines.
fn parse_candidates(system: &str) -> Result<Vec<(usize, Option<String>)>, GatewayError> {
    let main_at = system
        .find("## Main Instance Descriptions\n")
        .ok_or_else(|| unrecognized(RoleKind::Llm))?;
    let end = system[main_at..]
        .find("IMPORTANT NOTE:")
        .map(|e| main_at + e)
        .unwrap_or(system.len());
    let mut out: Vec<(usize, Option<String>)> = Vec::new();
    for line in system[main_at..end].lines() {
        if let Some(desc) = line.strip_prefix("Instance Description: ") {
            if let Some(last) = out.last_mut() {
                last.1 = Some(desc.to_string());
            }
            continue;
        }
        let Some((num, rest)) = line.split_once(". ") else { continue };
        if let Ok(idx) = num.parse::<usize>() {
            if rest.ends_with(']') {
                out.push((idx, None));
            }
        }
    }
    Ok(out)
}

/// Parses the `name[a, b, c, d]` span of an instance-description prompt.
fn parse_region(user: &str) -> Result<(String, NormalizedBox), GatewayError> {
    let bad = || GatewayError::Oracle(format!("cannot parse region from {user:?}"));
    let close = user.find("]. Note:").ok_or_else(bad)?;
    let open = user[..close].rfind('[').ok_or_else(bad)?;
    let name_start = user[..open].rfind(": ").map(|p| p + 2).ok_or_else(bad)?;
    let vals: Vec<f64> = user[open + 1..close]
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [cx, cy, w, h] = vals.as_slice() else {
        return Err(bad());
    };
    let b = NormalizedBox::from_fractions(*cx, *cy, *w, *h).map_err(|_| bad())?;
    Ok((user[name_start..open].to_string(), b))
}

/// Oracle for both chat roles.
pub struct OracleChat {
    registry: Arc<SceneRegistry>,
    config: OracleConfig,
    model: String,
}

impl OracleChat {
    pub fn new(registry: Arc<SceneRegistry>, config: OracleConfig, model: &str) -> Self {
        Self {
            registry,
            config,
            model: model.to_string(),
        }
    }

    fn mllm(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let user = first_user(req).ok_or_else(|| unrecognized(RoleKind::Mllm))?;
        let img = user
            .image
            .as_ref()
            .ok_or_else(|| unrecognized(RoleKind::Mllm))?
            .decode_rgb()
            .map_err(|e| GatewayError::Oracle(e.to_string()))?;
        if user.text.starts_with("Describe the object marked by") {
            let (_, nbox) = parse_region(&user.text)?;
            let dims = crate::geometry::ImageDims::new(img.width(), img.height())
                .map_err(|e| GatewayError::Oracle(e.to_string()))?;
            let approx = denormalize(&nbox, dims);
            let (scene, obj) = self
                .registry
                .locate_region(&img, &approx)
                .map_err(GatewayError::Oracle)?;
            return Ok(corrupted_sentence(
                &scene.scene_id,
                obj,
                req.sample_index,
                self.config.corruption_rate,
            ));
        }
        let scene = self
            .registry
            .by_image(&img)
            .ok_or_else(|| GatewayError::Oracle("image matches no known scene".into()))?;
        Ok(scene.global_caption.clone())
    }

    fn llm(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let system = system_text(req);
        let user = first_user(req).map(|m| m.text.as_str()).unwrap_or("");
        if system.starts_with("You are an object extractor") {
            let query = user
                .lines()
                .rev()
                .find_map(|l| l.strip_prefix("Query: "))
                .unwrap_or(user);
            return Ok(oracle_concepts(&self.registry, query));
        }
        if system.starts_with("You are a subject extractor") {
            return Ok(oracle_concepts(&self.registry, user));
        }
        if system.contains("\"Blind Teacher,\"") {
            let candidates = parse_candidates(system)?;
            return Ok(oracle_select(user, &candidates, self.config.min_overlap));
        }
        if system.starts_with("You will receive") {
            let listed: Vec<String> = user
                .lines()
                .filter_map(|l| l.split_once(". ").filter(|(n, _)| n.parse::<usize>().is_ok()))
                .map(|(_, d)| d.to_string())
                .collect();
            return majority(&listed).ok_or_else(|| unrecognized(RoleKind::Llm));
        }
        Err(unrecognized(RoleKind::Llm))
    }
}

impl ChatBackend for OracleChat {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, role: RoleKind, request: &ChatRequest) -> Result<String, GatewayError> {
        match role {
            RoleKind::Mllm => self.mllm(request),
            RoleKind::Llm => self.llm(request),
            RoleKind::Detector => Err(GatewayError::InvalidRequest(
                "chat oracle cannot serve the detector role".into(),
            )),
        }
    }
}

pub struct OracleDetector {
    registry: Arc<SceneRegistry>,
    model: String,
}

impl OracleDetector {
    pub fn new(registry: Arc<SceneRegistry>, model: &str) -> Self {
        Self {
            registry,
            model: model.to_string(),
        }
    }
}

impl DetectorBackend for OracleDetector {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>, GatewayError> {
        let img = request
            .image
            .decode_rgb()
            .map_err(|e| GatewayError::Oracle(e.to_string()))?;
        let scene = self
            .registry
            .by_image(&img)
            .ok_or_else(|| GatewayError::Oracle("image matches no known scene".into()))?;
        let mut out = Vec::new();
        for term in &request.vocabulary {
            let term = super::normalize_concept(term);
            for o in &scene.objects {
                if o.answers_to(&term) && o.detector_confidence >= request.confidence_threshold {
                    out.push(Detection::new(&term, o.bbox));
                }
            }
        }
        Ok(out)
    }
}
