//! Training-free referring-expression grounding.
//!
//! A query is grounded in five steps: the multimodal model captions the image,
//! the text model extracts candidate concepts, an open-vocabulary detector
//! proposes boxes for each concept, the boxes are filtered, deduplicated and
//! ranked, the largest ones are described by the multimodal model, and the
//! text model reasons over all candidates to pick one index or reject.
//!
//! Model roles sit behind [`gateway`] traits with live HTTP, cassette and
//! oracle implementations. [`eval`] runs datasets and writes reports.

pub mod config;
pub mod eval;
pub mod gateway;
pub mod geometry;
pub mod imaging;
pub mod pipeline;
pub mod prompt;
pub mod scene;

pub use config::RunConfig;
pub use eval::{aggregate, judge_sample, AblationMode, DatasetRecord, MetricsReport, SampleOutcome};
pub use gateway::{ChatMessage, ChatRequest, DetectRequest, Detection, Gateway, GatewayError, RoleKind};
pub use geometry::{denormalize, iou, nms, normalize, ImageDims, NormalizedBox, PixelBox};
pub use imaging::ImagePayload;
pub use pipeline::{
    CandidateSet, GroundingAgent, GroundingResult, PipelineConfig, PipelineError, ReasoningTrace,
};
pub use prompt::{PromptBundle, PromptTemplates, VisualPromptSpec};
pub use scene::{SceneManifest, SceneRegistry};
