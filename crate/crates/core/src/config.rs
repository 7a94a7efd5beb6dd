//! Run configuration (TOML) and construction of the model gateway.
//!
//! ```toml
//! seed = 7
//!
//! [pipeline]
//! self_consistency_n = 5
//!
//! [backends.llm]
//! backend = "http"
//! base_url = "http://localhost:8000/v1"
//! model_name = "some-llm"
//! api_key_env = "LLM_API_KEY"
//!
//! [backends.mllm]
//! backend = "oracle"
//!
//! [backends.detector]
//! backend = "oracle"
//!
//! [oracle]
//! scenes_dir = "scenes"
//!
//! [cassette]
//! mode = "record"
//! path = "run.cassette.jsonl"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::cassette::{Cassette, CassetteChat, CassetteDetector};
use crate::gateway::http::{EndpointConfig, HttpChatBackend, HttpDetectorBackend};
use crate::gateway::oracle::{OracleChat, OracleConfig, OracleDetector};
use crate::gateway::{ChatBackend, DetectorBackend, Gateway, GatewayError};
use crate::pipeline::{GroundingAgent, PipelineConfig};
use crate::prompt::PromptTemplates;
use crate::scene::SceneRegistry;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {message}")]
    Read { path: String, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Gateway(#[from] GatewayError),
}

fn oracle_model() -> String {
    "oracle".into()
}

/// Backend for one model role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum BackendSpec {
    Http(EndpointConfig),
    Oracle {
        #[serde(default = "oracle_model")]
        model_name: String,
    },
}

impl BackendSpec {
    pub fn oracle() -> Self {
        BackendSpec::Oracle {
            model_name: oracle_model(),
        }
    }

    pub fn model_name(&self) -> &str {
        match self {
            BackendSpec::Http(e) => &e.model_name,
            BackendSpec::Oracle { model_name } => model_name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backends {
    pub llm: BackendSpec,
    pub mllm: BackendSpec,
    pub detector: BackendSpec,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            llm: BackendSpec::oracle(),
            mllm: BackendSpec::oracle(),
            detector: BackendSpec::oracle(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Directory of scene manifests the oracle backends answer from.
    pub scenes_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub behaviour: OracleConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    #[default]
    Off,
    Record,
    Replay,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteSection {
    #[serde(default)]
    pub mode: CassetteMode,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSection {
    /// Worker threads for sample-level parallelism; 0 picks the core count.
    #[serde(default)]
    pub threads: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for everything random (scene generation).
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub backends: Backends,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub cassette: CassetteSection,
    #[serde(default)]
    pub runtime: RuntimeSection,
    /// Directory of prompt-template override files.
    pub template_dir: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        resolve(base, &mut cfg.oracle.scenes_dir);
        resolve(base, &mut cfg.cassette.path);
        resolve(base, &mut cfg.template_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn roles(&self) -> [(&'static str, &BackendSpec); 3] {
        [
            ("llm", &self.backends.llm),
            ("mllm", &self.backends.mllm),
            ("detector", &self.backends.detector),
        ]
    }

    /// Checks every threshold and cross-field requirement. Runs before any
    /// backend is built.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = ConfigError::Invalid;
        self.pipeline.validate().map_err(|e| invalid(format!("pipeline: {e}")))?;
        self.oracle.behaviour.validate().map_err(|e| invalid(format!("oracle: {e}")))?;
        for (role, spec) in self.roles() {
            match spec {
                BackendSpec::Http(e) => e.validate().map_err(|m| invalid(format!("backends.{role}: {m}")))?,
                BackendSpec::Oracle { model_name } => {
                    if model_name.is_empty() {
                        return Err(invalid(format!("backends.{role}: model_name is empty")));
                    }
                    if self.cassette.mode != CassetteMode::Replay && self.oracle.scenes_dir.is_none() {
                        return Err(invalid(format!(
                            "backends.{role} uses the oracle but oracle.scenes_dir is not set"
                        )));
                    }
                }
            }
        }
        if self.cassette.mode != CassetteMode::Off && self.cassette.path.is_none() {
            return Err(invalid("cassette.path is required when cassette.mode is set".into()));
        }
        Ok(())
    }

    /// Names of environment variables holding API keys.
    pub fn secret_env_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, spec) in self.roles() {
            if let BackendSpec::Http(e) = spec {
                if !e.api_key_env.is_empty() && !out.contains(&e.api_key_env) {
                    out.push(e.api_key_env.clone());
                }
            }
        }
        out
    }

    pub fn templates(&self) -> Result<PromptTemplates, ConfigError> {
        match &self.template_dir {
            Some(dir) => PromptTemplates::with_overrides(dir).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(PromptTemplates::default()),
        }
    }

    /// Builds the gateway. In replay mode no live or oracle backend is
    /// constructed at all, so nothing can reach the network.
    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        self.validate()?;
        let cassette = match self.cassette.mode {
            CassetteMode::Off => None,
            CassetteMode::Record => Some(Arc::new(Cassette::open_for_record(self.cassette.path.as_ref().unwrap())?)),
            CassetteMode::Replay => Some(Arc::new(Cassette::load(self.cassette.path.as_ref().unwrap())?)),
        };
        if let Some(c) = cassette.as_ref().filter(|_| self.cassette.mode == CassetteMode::Replay) {
            let chat = |spec: &BackendSpec| -> Arc<dyn ChatBackend> { Arc::new(CassetteChat::replay(spec.model_name(), c.clone())) };
            return Ok(Gateway::new(
                chat(&self.backends.llm),
                chat(&self.backends.mllm),
                Arc::new(CassetteDetector::replay(self.backends.detector.model_name(), c.clone())),
            ));
        }

        let registry = if self.roles().iter().any(|(_, s)| matches!(s, BackendSpec::Oracle { .. })) {
            let dir = self.oracle.scenes_dir.as_ref().unwrap();
            let reg = SceneRegistry::from_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if reg.is_empty() {
                return Err(ConfigError::Invalid(format!("no scene manifests in {}", dir.display())));
            }
            Some(Arc::new(reg))
        } else {
            None
        };
        let chat = |spec: &BackendSpec| -> Result<Arc<dyn ChatBackend>, ConfigError> {
            let inner: Arc<dyn ChatBackend> = match spec {
                BackendSpec::Http(e) => Arc::new(HttpChatBackend::new(e.clone())?),
                BackendSpec::Oracle { model_name } => Arc::new(OracleChat::new(
                    registry.clone().unwrap(),
                    self.oracle.behaviour.clone(),
                    model_name,
                )),
            };
            Ok(match &cassette {
                Some(c) => Arc::new(CassetteChat::recording(inner, c.clone())),
                None => inner,
            })
        };
        let detector: Arc<dyn DetectorBackend> = {
            let inner: Arc<dyn DetectorBackend> = match &self.backends.detector {
                BackendSpec::Http(e) => Arc::new(HttpDetectorBackend::new(e.clone())?),
                BackendSpec::Oracle { model_name } => Arc::new(OracleDetector::new(registry.clone().unwrap(), model_name)),
            };
            match &cassette {
                Some(c) => Arc::new(CassetteDetector::recording(inner, c.clone())),
                None => inner,
            }
        };
        Ok(Gateway::new(chat(&self.backends.llm)?, chat(&self.backends.mllm)?, detector))
    }

    pub fn build_agent(&self) -> Result<GroundingAgent, ConfigError> {
        let templates = self.templates()?;
        let gateway = self.build_gateway()?;
        Ok(GroundingAgent::new(gateway, self.pipeline.clone(), templates))
    }
}
