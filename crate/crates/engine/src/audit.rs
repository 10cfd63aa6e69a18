//! Per-item audit records. Every item a stage drops gets exactly one record
//! with a machine-readable reason; warnings and flags are recorded too.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Image,
    Describe,
    Ground,
    Verify,
    Refine,
    Generate,
    Align,
    Negatives,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Removed before any verification.
    Dropped,
    /// Removed by a verifier verdict (or a verifier failure).
    Rejected,
    /// Kept, with a note.
    Warning,
    /// Kept, but the image yielded less than asked for.
    Flagged,
}

impl Action {
    pub fn removes_item(self) -> bool {
        matches!(self, Action::Dropped | Action::Rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    ImageFailed,
    Backend,
    UnparseableResponse,
    NoDescriptions,
    LowYield,
    DescriptionEmpty,
    DescriptionTooLong,
    DescriptionOverLimit,
    EmptySeedMask,
    NoDetection,
    BoxClamped,
    SegmentationFailed,
    ConsistencyRejected,
    UnparseableVerdict,
    RefineNoCandidates,
    RefineFallback,
    MalformedPrompt,
    PromptOverLimit,
    DuplicatePrompt,
    DanglingRegion,
    TrivialPrompt,
    AlignmentRejected,
    NegativeRejected,
    NegativeOverQuota,
}

impl Reason {
    pub fn as_str(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub image_id: String,
    pub stage: Stage,
    pub action: Action,
    pub reason: Reason,
    /// What the record is about: a region index, prompt text or concept.
    pub item: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Collects records for one image.
#[derive(Debug, Default, Clone)]
pub struct AuditLog {
    pub records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn push(&mut self, image_id: &str, stage: Stage, action: Action, reason: Reason, item: impl Into<String>) {
        self.push_detail(image_id, stage, action, reason, item, String::new());
    }

    pub fn push_detail(
        &mut self,
        image_id: &str,
        stage: Stage,
        action: Action,
        reason: Reason,
        item: impl Into<String>,
        detail: impl Into<String>,
    ) {
        let record = AuditRecord {
            image_id: image_id.to_string(),
            stage,
            action,
            reason,
            item: item.into(),
            detail: detail.into(),
        };
        log::debug!("audit {record:?}");
        self.records.push(record);
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = AuditRecord>) {
        self.records.extend(records);
    }
}

/// One JSON object per line, in the given order.
pub fn audit_jsonl(records: &[AuditRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("audit record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_audit_jsonl(text: &str) -> Result<Vec<AuditRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
