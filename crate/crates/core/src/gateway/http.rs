//! Live HTTP backends.
//!
//! Chat roles speak the common chat-completions dialect: `POST
//! {base_url}/chat/completions` with role-tagged messages, where a message
//! carrying an image sends its content as a `text` part followed by an
//! `image_url` part holding a base64 data URL.
//!
//! The detector role is `POST {base_url}/detect` with body
//! `{"image": <base64>, "vocabulary": [..], "confidence_threshold": x}`,
//! answered by `{"detections": [{"label": .., "box": [x_min, y_min, x_max, y_max]}]}`
//! in top-left-origin pixels.

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::limiter::InFlightLimiter;
use super::{
    ChatBackend, ChatRequest, DetectRequest, Detection, DetectorBackend, GatewayError, RoleKind,
};
use crate::geometry::PixelBox;

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. Empty for none.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl EndpointConfig {
    pub fn new(base_url: &str, model_name: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            api_key_env: String::new(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            retry_backoff_ms: default_backoff_ms(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0) {
            return Err(format!("timeout_secs must be > 0, got {}", self.timeout_secs));
        }
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.base_url.is_empty() {
            return Err("base_url is empty".into());
        }
        if self.model_name.is_empty() {
            return Err("model_name is empty".into());
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be >= 1".into());
        }
        Ok(())
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }
}

/// Shared transport: auth, retries with exponential backoff, in-flight cap.
struct Transport {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    limiter: InFlightLimiter,
}

impl Transport {
    fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        config.validate().map_err(GatewayError::InvalidRequest)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let limiter = InFlightLimiter::new(config.max_in_flight);
        Ok(Self {
            config,
            client,
            limiter,
        })
    }

    fn api_key(&self) -> Result<Option<String>, GatewayError> {
        if self.config.api_key_env.is_empty() {
            return Ok(None);
        }
        std::env::var(&self.config.api_key_env)
            .map(Some)
            .map_err(|_| GatewayError::MissingSecret(self.config.api_key_env.clone()))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.config.endpoint(path);
        let key = self.api_key()?;
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let _permit = self.limiter.acquire();
            match self.post_once(&url, key.as_deref(), body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    log::warn!("POST {url} attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        let message = match last {
            Some(GatewayError::Transport { message, .. }) => message,
            Some(other) => other.to_string(),
            None => "no attempt made".into(),
        };
        Err(GatewayError::Transport { attempts, message })
    }

    fn post_once(&self, url: &str, key: Option<&str>, body: &Value) -> Result<Value, GatewayError> {
        let mut req = self.client.post(url).json(body);
        if let Some(k) = key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| GatewayError::Transport {
            attempts: 1,
            message: e.without_url().to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        match status.as_u16() {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| GatewayError::MalformedResponse(format!("{e}: {}", snippet(&text)))),
            401 | 403 => Err(GatewayError::Auth(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => Err(GatewayError::Transport {
                attempts: 1,
                message: format!("HTTP {status}"),
            }),
            _ => Err(GatewayError::InvalidRequest(format!(
                "HTTP {status}: {}",
                snippet(&text)
            ))),
        }
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(200).collect()
}

pub struct HttpChatBackend {
    transport: Transport,
}

impl HttpChatBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        Ok(Self {
            transport: Transport::new(config)?,
        })
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| match &m.image {
                None => json!({"role": m.role.as_str(), "content": m.text}),
                Some(img) => json!({
                    "role": m.role.as_str(),
                    "content": [
                        {"type": "text", "text": m.text},
                        {"type": "image_url", "image_url": {"url": img.data_url()}},
                    ],
                }),
            })
            .collect();
        json!({
            "model": self.transport.config.model_name,
            "temperature": request.temperature.unwrap_or(self.transport.config.temperature),
            "messages": messages,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn model_name(&self) -> &str {
        &self.transport.config.model_name
    }

    fn complete(&self, _role: RoleKind, request: &ChatRequest) -> Result<String, GatewayError> {
        let resp = self.transport.post("chat/completions", &self.body(request))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                GatewayError::MalformedResponse("missing choices[0].message.content".into())
            })
    }
}

#[derive(Deserialize)]
struct WireDetections {
    detections: Vec<WireDetection>,
}

#[derive(Deserialize)]
struct WireDetection {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

pub struct HttpDetectorBackend {
    transport: Transport,
}

impl HttpDetectorBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        Ok(Self {
            transport: Transport::new(config)?,
        })
    }
}

impl DetectorBackend for HttpDetectorBackend {
    fn model_name(&self) -> &str {
        &self.transport.config.model_name
    }

    fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>, GatewayError> {
        let body = json!({
            "image": base64::engine::general_purpose::STANDARD.encode(request.image.bytes()),
            "vocabulary": request.vocabulary,
            "confidence_threshold": request.confidence_threshold,
        });
        let resp = self.transport.post("detect", &body)?;
        let wire: WireDetections = serde_json::from_value(resp)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let dims = request.image.dims();
        let mut out = Vec::with_capacity(wire.detections.len());
        for d in wire.detections {
            let [x0, y0, x1, y1] = d.bbox;
            let fits = PixelBox::new(x0, y0, x1, y1)
                .ok()
                .filter(|b| dims.contains(b));
            match fits.or_else(|| PixelBox::clamped(x0, y0, x1, y1, dims)) {
                Some(b) => {
                    if fits.is_none() {
                        log::warn!("clamped detector box {:?} for {:?} into {dims}", d.bbox, d.label);
                    }
                    out.push(Detection::new(&d.label, b));
                }
                None => log::warn!("dropped degenerate detector box {:?} for {:?}", d.bbox, d.label),
            }
        }
        Ok(out)
    }
}
