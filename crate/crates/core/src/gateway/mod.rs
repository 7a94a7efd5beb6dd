//! Clients for the three model roles the pipeline talks to: a text-only LLM,
//! a multimodal LLM, and an open-vocabulary detector.
//!
//! Every role sits behind a trait so the pipeline is indifferent to whether it
//! is talking to a live HTTP endpoint ([`http`]), a recorded cassette
//! ([`cassette`]), or a deterministic oracle defined over synthetic scene
//! manifests ([`oracle`]).

pub mod cassette;
pub mod http;
pub mod limiter;
pub mod oracle;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{ImageDims, PixelBox};
use crate::imaging::ImagePayload;

/// Which model role a request targets. Part of every cassette digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleKind {
    Llm,
    Mllm,
    Detector,
}

impl fmt::Display for RoleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoleKind::Llm => "llm",
            RoleKind::Mllm => "mllm",
            RoleKind::Detector => "detector",
        })
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingSecret(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cassette miss for {role} request {digest}")]
    CassetteMiss { role: RoleKind, digest: String },
    #[error("cassette i/o failure: {0}")]
    CassetteIo(String),
    #[error("oracle: {0}")]
    Oracle(String),
}

impl GatewayError {
    /// Only transport failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
    pub image: Option<ImagePayload>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            text: text.into(),
            image: None,
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            text: text.into(),
            image: None,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            text: text.into(),
            image: None,
        }
    }

    pub fn user_with_image(text: impl Into<String>, image: ImagePayload) -> Self {
        Self {
            role: ChatRole::User,
            text: text.into(),
            image: Some(image),
        }
    }
}

/// One chat-completion call.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    /// Overrides the endpoint's configured temperature.
    pub temperature: Option<f64>,
    /// Distinguishes repeated stochastic draws of an otherwise identical
    /// request (self-consistency sampling). Zero for single-shot calls.
    pub sample_index: u32,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: None,
            sample_index: 0,
        }
    }

    pub fn with_sampling(mut self, temperature: f64, sample_index: u32) -> Self {
        self.temperature = Some(temperature);
        self.sample_index = sample_index;
        self
    }

    fn image_count(&self) -> usize {
        self.messages.iter().filter(|m| m.image.is_some()).count()
    }

    /// Stable content digest used to key cassette entries.
    pub fn digest(&self, role: RoleKind, model: &str) -> String {
        let messages: Vec<serde_json::Value> = self
            .messages
            .iter()
            .map(|m| {
                serde_json::json!({
                    "role": m.role.as_str(),
                    "text": m.text,
                    "image": m.image.as_ref().map(|i| i.digest()),
                })
            })
            .collect();
        let canonical = serde_json::json!({
            "role_kind": role,
            "model": model,
            "temperature": self.temperature,
            "sample_index": self.sample_index,
            "messages": messages,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

/// A labeled box from the detector. No confidence is surfaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub concept: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

impl Detection {
    pub fn new(concept: &str, bbox: PixelBox) -> Self {
        Self {
            concept: normalize_concept(concept),
            bbox,
        }
    }
}

/// Lowercases and trims a concept label, collapsing inner whitespace.
pub fn normalize_concept(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// One detector invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectRequest {
    pub image: ImagePayload,
    pub vocabulary: Vec<String>,
    /// Passed through to the detector service; the engine never sees scores.
    pub confidence_threshold: f64,
}

impl DetectRequest {
    pub fn digest(&self, model: &str) -> String {
        let canonical = serde_json::json!({
            "role_kind": RoleKind::Detector,
            "model": model,
            "image": self.image.digest(),
            "vocabulary": self.vocabulary,
            "confidence_threshold": self.confidence_threshold,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

pub trait ChatBackend: Send + Sync {
    /// Model identifier; part of the cassette digest.
    fn model_name(&self) -> &str;
    fn complete(&self, role: RoleKind, request: &ChatRequest) -> Result<String, GatewayError>;
}

pub trait DetectorBackend: Send + Sync {
    fn model_name(&self) -> &str;
    fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>, GatewayError>;
}

/// The three role clients used by one pipeline instance.
#[derive(Clone)]
pub struct Gateway {
    llm: Arc<dyn ChatBackend>,
    mllm: Arc<dyn ChatBackend>,
    detector: Arc<dyn DetectorBackend>,
}

impl Gateway {
    pub fn new(
        llm: Arc<dyn ChatBackend>,
        mllm: Arc<dyn ChatBackend>,
        detector: Arc<dyn DetectorBackend>,
    ) -> Self {
        Self {
            llm,
            mllm,
            detector,
        }
    }

    /// Text-only completion. Rejects requests carrying images.
    pub fn llm_complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        if request.image_count() > 0 {
            return Err(GatewayError::InvalidRequest(
                "llm requests must not carry images".into(),
            ));
        }
        self.llm.complete(RoleKind::Llm, request)
    }

    /// Multimodal completion. Exactly one user message must carry an image.
    pub fn mllm_complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        if request.image_count() != 1 {
            return Err(GatewayError::InvalidRequest(format!(
                "mllm requests need exactly one image, got {}",
                request.image_count()
            )));
        }
        if request
            .messages
            .iter()
            .any(|m| m.image.is_some() && m.role != ChatRole::User)
        {
            return Err(GatewayError::InvalidRequest(
                "images may only ride on user messages".into(),
            ));
        }
        self.mllm.complete(RoleKind::Mllm, request)
    }

    /// Runs the detector and enforces the box contract: every returned box
    /// lies inside the image (out-of-range coordinates are clamped).
    pub fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>, GatewayError> {
        if request.vocabulary.is_empty() {
            return Err(GatewayError::InvalidRequest("empty vocabulary".into()));
        }
        let dims = request.image.dims();
        let raw = self.detector.detect(request)?;
        Ok(raw
            .into_iter()
            .filter_map(|d| clamp_detection(d, dims))
            .collect())
    }
}

fn clamp_detection(d: Detection, dims: ImageDims) -> Option<Detection> {
    if dims.contains(&d.bbox) {
        return Some(d);
    }
    let [x0, y0, x1, y1] = d.bbox.to_array();
    match PixelBox::clamped(x0, y0, x1, y1, dims) {
        Some(b) => {
            log::warn!("clamped {} box {} into {}", d.concept, d.bbox, dims);
            Some(Detection {
                concept: d.concept,
                bbox: b,
            })
        }
        None => {
            log::warn!("dropped {} box {} outside {}", d.concept, d.bbox, dims);
            None
        }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
