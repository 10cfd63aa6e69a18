//! Core types for conversational image segmentation: samples and manifests,
//! bit-exact mask geometry, and benchmark metrics.

pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod sample;
pub mod synthetic;

pub use manifest::{load_manifest, manifest_stats, save_manifest, DatasetManifest, ManifestError, SplitStats};
pub use mask::{binary_iou, rle_decode, rle_encode, BinaryMask, BoundingBox, MaskError, MaskRle};
pub use metrics::{ciou, giou, per_concept_report, ConceptReport, EvalPair, MetricsError};
pub use sample::{ConceptFamily, ImageRecord, Provenance, Sample, Split};
