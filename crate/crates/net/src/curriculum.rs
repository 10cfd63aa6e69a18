//! Training data groups and the two-phase sampling curriculum.
//!
//! Phase 1 draws uniformly (by sample) from the union of the literal,
//! referring and open-vocabulary groups. Phase 2 first picks one of three
//! categories with equal probability (conversational positives,
//! conversational negatives, or the phase-1 pool) and then a sample uniformly
//! within it. All draws are with replacement.

use std::fmt;
use std::str::FromStr;

use convseg_core::{DatasetManifest, Sample};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupId {
    Literal,
    Referring,
    OpenVocabRegions,
    ConversationalPos,
    ConversationalNeg,
}

impl GroupId {
    pub const ALL: [GroupId; 5] = [
        GroupId::Literal,
        GroupId::Referring,
        GroupId::OpenVocabRegions,
        GroupId::ConversationalPos,
        GroupId::ConversationalNeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupId::Literal => "literal",
            GroupId::Referring => "referring",
            GroupId::OpenVocabRegions => "open_vocab_regions",
            GroupId::ConversationalPos => "conversational_pos",
            GroupId::ConversationalNeg => "conversational_neg",
        }
    }

    pub fn is_pretraining(self) -> bool {
        matches!(self, GroupId::Literal | GroupId::Referring | GroupId::OpenVocabRegions)
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupId {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        GroupId::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| NetError::Curriculum(format!("unknown data group {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct DataGroup {
    pub id: GroupId,
    pub manifest: DatasetManifest,
}

impl DataGroup {
    /// Rejects manifests whose negative flags disagree with the group.
    pub fn new(id: GroupId, manifest: DatasetManifest) -> Result<Self> {
        let want_negative = id == GroupId::ConversationalNeg;
        if let Some(s) = manifest.samples.iter().find(|s| s.is_negative != want_negative) {
            return Err(NetError::Curriculum(format!(
                "group {id} cannot contain sample {} (is_negative = {})",
                s.sample_id, s.is_negative
            )));
        }
        Ok(DataGroup { id, manifest })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Phase {
    Pretrain,
    Conversational,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Pretrain => 1,
            Phase::Conversational => 2,
        }
    }
}

impl TryFrom<u8> for Phase {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Phase::Pretrain),
            2 => Ok(Phase::Conversational),
            other => Err(format!("phase must be 1 or 2, got {other}")),
        }
    }
}

impl From<Phase> for u8 {
    fn from(p: Phase) -> u8 {
        p.number()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawCategory {
    Pretrain,
    ConversationalPos,
    ConversationalNeg,
}

impl DrawCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            DrawCategory::Pretrain => "pretrain",
            DrawCategory::ConversationalPos => "conversational_pos",
            DrawCategory::ConversationalNeg => "conversational_neg",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Draw<'a> {
    pub category: DrawCategory,
    pub group: GroupId,
    pub sample: &'a Sample,
}

/// Flattened sampling pools for one phase.
#[derive(Debug, Clone)]
pub struct Curriculum<'a> {
    phase: Phase,
    pretrain: Vec<(GroupId, &'a Sample)>,
    positives: Vec<&'a Sample>,
    negatives: Vec<&'a Sample>,
}

impl<'a> Curriculum<'a> {
    pub fn new(phase: Phase, groups: &'a [DataGroup]) -> Result<Self> {
        let mut c = Curriculum {
            phase,
            pretrain: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
        };
        for g in groups {
            for s in &g.manifest.samples {
                match g.id {
                    GroupId::ConversationalPos => c.positives.push(s),
                    GroupId::ConversationalNeg => c.negatives.push(s),
                    id => c.pretrain.push((id, s)),
                }
            }
        }
        if c.pretrain.is_empty() {
            return Err(NetError::Curriculum(
                "no samples in the literal, referring or open-vocabulary groups".into(),
            ));
        }
        if phase == Phase::Conversational {
            if c.positives.is_empty() {
                return Err(NetError::Curriculum("conversational_pos group is empty".into()));
            }
            if c.negatives.is_empty() {
                return Err(NetError::Curriculum("conversational_neg group is empty".into()));
            }
        }
        Ok(c)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw<'a> {
        let category = match self.phase {
            Phase::Pretrain => DrawCategory::Pretrain,
            Phase::Conversational => match rng.gen_range(0..3) {
                0 => DrawCategory::ConversationalPos,
                1 => DrawCategory::ConversationalNeg,
                _ => DrawCategory::Pretrain,
            },
        };
        match category {
            DrawCategory::Pretrain => {
                let (group, sample) = self.pretrain[rng.gen_range(0..self.pretrain.len())];
                Draw {
                    category,
                    group,
                    sample,
                }
            }
            DrawCategory::ConversationalPos => Draw {
                category,
                group: GroupId::ConversationalPos,
                sample: self.positives[rng.gen_range(0..self.positives.len())],
            },
            DrawCategory::ConversationalNeg => Draw {
                category,
                group: GroupId::ConversationalNeg,
                sample: self.negatives[rng.gen_range(0..self.negatives.len())],
            },
        }
    }
}

pub fn sample_batch<'a, R: Rng + ?Sized>(
    phase: Phase,
    groups: &'a [DataGroup],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Draw<'a>>> {
    let c = Curriculum::new(phase, groups)?;
    Ok((0..batch_size).map(|_| c.draw(rng)).collect())
}

#[cfg(test)]
mod tests {
    use convseg_core::{ConceptFamily, ImageRecord, MaskRle, Provenance, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample(id: &str, negative: bool) -> Sample {
        let mut rle = MaskRle::empty(2, 2);
        if !negative {
            rle.counts = vec![0, 4];
        }
        Sample {
            sample_id: id.into(),
            image: ImageRecord {
                image_id: "img".into(),
                uri: "img.png".into(),
                width: 2,
                height: 2,
            },
            prompt: "p".into(),
            mask: rle,
            concept: ConceptFamily::Entities,
            split: Split::Train,
            provenance: Provenance::SyntheticTest,
            is_negative: negative,
        }
    }

    fn groups(sizes: [usize; 5]) -> Vec<DataGroup> {
        GroupId::ALL
            .iter()
            .zip(sizes)
            .map(|(&id, n)| {
                let neg = id == GroupId::ConversationalNeg;
                let samples = (0..n).map(|i| sample(&format!("{id}-{i}"), neg)).collect();
                DataGroup::new(id, DatasetManifest::new(samples)).unwrap()
            })
            .collect()
    }

    #[test]
    fn phase_one_never_draws_conversational_samples() {
        let g = groups([5, 3, 2, 7, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = sample_batch(Phase::Pretrain, &g, 5000, &mut rng).unwrap();
        assert!(draws.iter().all(|d| d.group.is_pretraining() && d.category == DrawCategory::Pretrain));
    }

    #[test]
    fn phase_one_is_uniform_by_sample() {
        let g = groups([9, 1, 0, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = sample_batch(Phase::Pretrain, &g, 10_000, &mut rng).unwrap();
        let referring = draws.iter().filter(|d| d.group == GroupId::Referring).count();
        // expected 1000, sd 30
        assert!((850..1150).contains(&referring), "{referring}");
    }

    #[test]
    fn draws_are_reproducible() {
        let g = groups([4, 4, 4, 4, 4]);
        let ids = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch(Phase::Conversational, &g, 50, &mut rng)
                .unwrap()
                .iter()
                .map(|d| d.sample.sample_id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(7), ids(7));
        assert_ne!(ids(7), ids(8));
    }

    #[test]
    fn required_groups_must_be_non_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(Phase::Conversational, &groups([3, 0, 0, 0, 2]), 1, &mut rng).is_err());
        assert!(sample_batch(Phase::Conversational, &groups([3, 0, 0, 2, 0]), 1, &mut rng).is_err());
        assert!(sample_batch(Phase::Pretrain, &groups([0, 0, 0, 2, 2]), 1, &mut rng).is_err());
        assert!(sample_batch(Phase::Pretrain, &groups([0, 0, 1, 0, 0]), 1, &mut rng).is_ok());
    }

    #[test]
    fn group_membership_is_checked() {
        let m = DatasetManifest::new(vec![sample("a", true)]);
        assert!(DataGroup::new(GroupId::Literal, m.clone()).is_err());
        assert!(DataGroup::new(GroupId::ConversationalNeg, m).is_ok());
    }

    #[test]
    fn phase_serializes_as_number() {
        assert_eq!(serde_json::to_string(&Phase::Conversational).unwrap(), "2");
        assert!(serde_json::from_str::<Phase>("3").is_err());
    }
}
