//! Intermediate records passed between stages and persisted in run state.

use std::collections::BTreeMap;

use convseg_core::{BinaryMask, BoundingBox, ConceptFamily};
use serde::{Deserialize, Serialize};

use crate::backends::Verdict;

/// A short region description from scene understanding. `index` is 1-based
/// and stable for the image; prompts refer to regions by it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionDescription {
    pub image_id: String,
    pub index: u32,
    pub text: String,
}

/// A described region with its masks. `final_mask` is set once the region
/// has passed verification (and refinement, if any).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedRegion {
    pub description: RegionDescription,
    pub bbox: BoundingBox,
    #[serde(with = "mask_rle")]
    pub initial_mask: BinaryMask,
    #[serde(default, with = "mask_rle_opt", skip_serializing_if = "Option::is_none")]
    pub refined_mask: Option<BinaryMask>,
    #[serde(default, with = "mask_rle_opt", skip_serializing_if = "Option::is_none")]
    pub final_mask: Option<BinaryMask>,
    /// Keyed by check name: `consistency`, `refinement`.
    #[serde(default)]
    pub verdicts: BTreeMap<String, Verdict>,
}

impl GroundedRegion {
    pub fn new(description: RegionDescription, bbox: BoundingBox, initial_mask: BinaryMask) -> Self {
        GroundedRegion {
            description,
            bbox,
            initial_mask,
            refined_mask: None,
            final_mask: None,
            verdicts: BTreeMap::new(),
        }
    }

    pub fn index(&self) -> u32 {
        self.description.index
    }

    pub fn is_accepted(&self) -> bool {
        self.verdicts.get("consistency") == Some(&Verdict::Accept) && self.final_mask.is_some()
    }
}

/// A generated prompt referring to accepted regions by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub image_id: String,
    pub concept: ConceptFamily,
    pub text: String,
    pub region_indices: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned: Option<Verdict>,
}

mod mask_rle {
    use convseg_core::{rle_decode, rle_encode, BinaryMask, MaskRle};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(mask: &BinaryMask, s: S) -> Result<S::Ok, S::Error> {
        rle_encode(mask).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BinaryMask, D::Error> {
        let rle = MaskRle::deserialize(d)?;
        rle_decode(&rle).map_err(serde::de::Error::custom)
    }
}

mod mask_rle_opt {
    use convseg_core::{rle_decode, rle_encode, BinaryMask, MaskRle};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(mask: &Option<BinaryMask>, s: S) -> Result<S::Ok, S::Error> {
        mask.as_ref().map(rle_encode).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BinaryMask>, D::Error> {
        match Option::<MaskRle>::deserialize(d)? {
            Some(rle) => rle_decode(&rle).map(Some).map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}
