//! Benchmark and training records.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::mask::MaskRle;

/// The five families of reasoning a conversational prompt can require.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptFamily {
    Entities,
    SpatialLayout,
    RelationsEvents,
    AffordancesFunctions,
    PhysicsSafety,
}

impl ConceptFamily {
    pub const ALL: [ConceptFamily; 5] = [
        ConceptFamily::Entities,
        ConceptFamily::SpatialLayout,
        ConceptFamily::RelationsEvents,
        ConceptFamily::AffordancesFunctions,
        ConceptFamily::PhysicsSafety,
    ];

    /// Identifier used in manifests and template paths.
    pub fn as_str(self) -> &'static str {
        match self {
            ConceptFamily::Entities => "entities",
            ConceptFamily::SpatialLayout => "spatial_layout",
            ConceptFamily::RelationsEvents => "relations_events",
            ConceptFamily::AffordancesFunctions => "affordances_functions",
            ConceptFamily::PhysicsSafety => "physics_safety",
        }
    }

    /// Human-readable name, as shown to annotators and VLMs.
    pub fn display_name(self) -> &'static str {
        match self {
            ConceptFamily::Entities => "Entities",
            ConceptFamily::SpatialLayout => "Spatial & Layout",
            ConceptFamily::RelationsEvents => "Relations & Events",
            ConceptFamily::AffordancesFunctions => "Affordances & Functions",
            ConceptFamily::PhysicsSafety => "Physics & Safety",
        }
    }

    /// Column header used in report tables.
    pub fn short_label(self) -> &'static str {
        match self {
            ConceptFamily::Entities => "Ent.",
            ConceptFamily::SpatialLayout => "Spat.",
            ConceptFamily::RelationsEvents => "Rel.",
            ConceptFamily::AffordancesFunctions => "Aff.",
            ConceptFamily::PhysicsSafety => "Phys.",
        }
    }
}

impl fmt::Display for ConceptFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConceptFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConceptFamily::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown concept family `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SamSeeded,
    HumanAnnotated,
    Train,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::SamSeeded => "sam_seeded",
            Split::HumanAnnotated => "human_annotated",
            Split::Train => "train",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sam_seeded" => Ok(Split::SamSeeded),
            "human_annotated" => Ok(Split::HumanAnnotated),
            "train" => Ok(Split::Train),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Engine,
    CocoInstances,
    CocoPanoptic,
    Refcoco,
    SyntheticTest,
}

/// An image referenced by path or URL; pixels are never stored in manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
}

/// One prompt-mask record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sample_id: String,
    pub image: ImageRecord,
    pub prompt: String,
    pub mask: MaskRle,
    pub concept: ConceptFamily,
    pub split: Split,
    pub provenance: Provenance,
    pub is_negative: bool,
}

impl Sample {
    /// Checks the per-record invariants, returning a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.prompt.trim().is_empty() {
            return Err("prompt is empty".into());
        }
        if self.image.width == 0 || self.image.height == 0 {
            return Err("image dimensions must be at least 1x1".into());
        }
        let [h, w] = self.mask.size;
        if h != self.image.height as usize || w != self.image.width as usize {
            return Err(format!(
                "mask size {h}x{w} does not match image {}x{}",
                self.image.height, self.image.width
            ));
        }
        let total: u64 = self.mask.counts.iter().sum();
        if total != (h * w) as u64 {
            return Err(format!("mask counts sum to {total}, expected {}", h * w));
        }
        let empty = self.mask.foreground_count() == 0;
        if empty != self.is_negative {
            return Err(format!(
                "is_negative={} but mask has {} foreground pixels",
                self.is_negative,
                self.mask.foreground_count()
            ));
        }
        Ok(())
    }

    pub fn word_count(&self) -> usize {
        self.prompt.split_whitespace().count()
    }
}

/// Flat on-disk form of a [`Sample`]; field order is the serialized key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct SampleLine {
    pub sample_id: String,
    pub image_id: String,
    pub image_uri: String,
    pub width: u32,
    pub height: u32,
    pub prompt: String,
    pub mask_rle: MaskRle,
    pub concept: ConceptFamily,
    pub split: Split,
    pub provenance: Provenance,
    pub is_negative: bool,
}

impl From<&Sample> for SampleLine {
    fn from(s: &Sample) -> Self {
        SampleLine {
            sample_id: s.sample_id.clone(),
            image_id: s.image.image_id.clone(),
            image_uri: s.image.uri.clone(),
            width: s.image.width,
            height: s.image.height,
            prompt: s.prompt.clone(),
            mask_rle: s.mask.clone(),
            concept: s.concept,
            split: s.split,
            provenance: s.provenance,
            is_negative: s.is_negative,
        }
    }
}

impl From<SampleLine> for Sample {
    fn from(l: SampleLine) -> Self {
        Sample {
            sample_id: l.sample_id,
            image: ImageRecord {
                image_id: l.image_id,
                uri: l.image_uri,
                width: l.width,
                height: l.height,
            },
            prompt: l.prompt,
            mask: l.mask_rle,
            concept: l.concept,
            split: l.split,
            provenance: l.provenance,
            is_negative: l.is_negative,
        }
    }
}

impl Serialize for Sample {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        SampleLine::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Sample {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        SampleLine::deserialize(deserializer).map(Sample::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concept_round_trips_through_str() {
        for c in ConceptFamily::ALL {
            assert_eq!(c.as_str().parse::<ConceptFamily>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.as_str()));
        }
        assert_eq!(ConceptFamily::ALL.len(), 5);
        assert!("vehicles".parse::<ConceptFamily>().is_err());
    }
}
