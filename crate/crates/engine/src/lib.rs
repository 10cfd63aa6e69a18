//! The generate-and-verify data engine: scene description, grounding, mask
//! verification and refinement, concept-specific prompt generation, prompt
//! alignment and negative generation, over pluggable VLM, detector and
//! segmenter backends.
//!
//! Every backend call is cached by content hash and every finished stage is
//! recorded per image, so an interrupted run resumes without repeating work
//! and repeated runs produce byte-identical outputs.

pub mod audit;
pub mod backends;
pub mod cache;
pub mod error;
mod fsutil;
pub mod pipeline;
pub mod render;
pub mod stages;
pub mod state;
pub mod templates;
pub mod types;

pub use audit::{audit_jsonl, parse_audit_jsonl, Action, AuditLog, AuditRecord, Reason, Stage};
pub use backends::{BackendConfig, BackendError, Backends, ImageInput, Verdict, VlmRequest, VlmResponse};
pub use cache::{CallCache, CallControl, CallStats};
pub use error::EngineError;
pub use pipeline::{
    image_records_from_dir, negatives_are_empty, parse_regions_jsonl, resume_pipeline, run_pipeline, EngineConfig,
    Pipeline, RunOutput, RunSummary,
};
pub use stages::{
    generate_negatives, stage1_describe, stage2_ground, stage3_refine, stage3_verify, stage4_generate, stage5_align,
    Services, StageParams,
};
pub use state::{EngineRunState, StageMarker};
pub use templates::{MetaPromptTemplate, TemplateKind, TemplateRegistry};
pub use types::{CandidatePrompt, GroundedRegion, RegionDescription};
