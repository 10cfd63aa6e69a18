//! Editable meta-prompt templates.
//!
//! Templates are plain text with `{name}` placeholders. Concept-specific
//! kinds live at `<dir>/<concept>/<kind>.txt`, the rest at
//! `<dir>/common/<kind>.txt`. A registry starts from the built-in defaults
//! and any file found on disk replaces the matching default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use convseg_core::ConceptFamily;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Positive,
    NegativeGeneration,
    NegativeVerification,
    Scene,
    MaskVerify,
    MaskCompare,
    AlignVerify,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 7] = [
        TemplateKind::Positive,
        TemplateKind::NegativeGeneration,
        TemplateKind::NegativeVerification,
        TemplateKind::Scene,
        TemplateKind::MaskVerify,
        TemplateKind::MaskCompare,
        TemplateKind::AlignVerify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Positive => "positive",
            TemplateKind::NegativeGeneration => "negative_generation",
            TemplateKind::NegativeVerification => "negative_verification",
            TemplateKind::Scene => "scene",
            TemplateKind::MaskVerify => "mask_verify",
            TemplateKind::MaskCompare => "mask_compare",
            TemplateKind::AlignVerify => "align_verify",
        }
    }

    /// Whether each concept family has its own template of this kind.
    pub fn is_per_concept(self) -> bool {
        matches!(self, TemplateKind::Positive | TemplateKind::NegativeGeneration)
    }

    /// Placeholders the stage using this kind fills in; each must appear.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::Scene => &["min_regions", "max_regions", "max_words"],
            TemplateKind::MaskVerify => &["description"],
            TemplateKind::MaskCompare => &["description"],
            TemplateKind::Positive => &["concept", "descriptions", "max_prompts"],
            TemplateKind::AlignVerify => &["prompt", "concept"],
            TemplateKind::NegativeGeneration => &["concept", "descriptions", "count"],
            TemplateKind::NegativeVerification => &["prompt"],
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown template kind `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {key} lacks placeholder {{{name}}}")]
    MissingPlaceholder { key: String, name: String },
    #[error("template {key} uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { key: String, name: String },
    #[error("no template {0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unexpected template file {0}")]
    UnexpectedFile(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPromptTemplate {
    /// `None` for kinds shared by all concepts.
    pub concept: Option<ConceptFamily>,
    pub kind: TemplateKind,
    pub text: String,
}

impl MetaPromptTemplate {
    fn key(&self) -> String {
        template_key(self.concept, self.kind)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let used = placeholders_in(&self.text);
        for name in self.kind.placeholders() {
            if !used.iter().any(|u| u == name) {
                return Err(TemplateError::MissingPlaceholder {
                    key: self.key(),
                    name: name.to_string(),
                });
            }
        }
        if let Some(u) = used.iter().find(|u| !self.kind.placeholders().contains(&u.as_str())) {
            return Err(TemplateError::UnknownPlaceholder {
                key: self.key(),
                name: u.clone(),
            });
        }
        Ok(())
    }

    /// Substitutes every `{name}`; `values` must cover the kind's placeholders.
    pub fn render(&self, values: &[(&str, String)]) -> String {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let tail = &rest[start + 1..];
            match placeholder_at(tail).and_then(|name| values.iter().find(|(k, _)| *k == name).map(|(_, v)| (name, v))) {
                Some((name, v)) => {
                    out.push_str(v);
                    rest = &tail[name.len() + 1..];
                }
                None => {
                    out.push('{');
                    rest = tail;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// `name` if `text` starts with `name}` and `name` is a lowercase identifier.
fn placeholder_at(text: &str) -> Option<&str> {
    let end = text.find('}')?;
    let name = &text[..end];
    (!name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_')).then_some(name)
}

fn placeholders_in(text: &str) -> Vec<String> {
    let mut found = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        rest = &rest[start + 1..];
        if let Some(name) = placeholder_at(rest) {
            if !found.iter().any(|f| f == name) {
                found.push(name.to_string());
            }
        }
    }
    found
}

fn template_key(concept: Option<ConceptFamily>, kind: TemplateKind) -> String {
    format!("{}/{}", concept.map_or("common", |c| c.as_str()), kind.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: BTreeMap<(Option<ConceptFamily>, TemplateKind), MetaPromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        TemplateRegistry::defaults()
    }
}

impl TemplateRegistry {
    pub fn defaults() -> Self {
        let mut templates = BTreeMap::new();
        for kind in TemplateKind::ALL {
            if kind.is_per_concept() {
                for c in ConceptFamily::ALL {
                    let text = default_text(Some(c), kind);
                    templates.insert((Some(c), kind), MetaPromptTemplate { concept: Some(c), kind, text });
                }
            } else {
                let text = default_text(None, kind);
                templates.insert((None, kind), MetaPromptTemplate { concept: None, kind, text });
            }
        }
        TemplateRegistry { templates }
    }

    /// Defaults overridden by whatever `<dir>/<concept|common>/<kind>.txt`
    /// files exist. Files that match no template are an error.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut reg = TemplateRegistry::defaults();
        let io = |p: &Path, e| TemplateError::Io {
            path: p.display().to_string(),
            source: e,
        };
        for group in std::fs::read_dir(dir).map_err(|e| io(dir, e))? {
            let group = group.map_err(|e| io(dir, e))?.path();
            if !group.is_dir() {
                continue;
            }
            let gname = group.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let concept = match gname.as_str() {
                "common" => None,
                other => Some(
                    other
                        .parse::<ConceptFamily>()
                        .map_err(|_| TemplateError::UnexpectedFile(group.display().to_string()))?,
                ),
            };
            for file in std::fs::read_dir(&group).map_err(|e| io(&group, e))? {
                let path = file.map_err(|e| io(&group, e))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let kind: TemplateKind = stem
                    .parse()
                    .map_err(|_| TemplateError::UnexpectedFile(path.display().to_string()))?;
                if kind.is_per_concept() != concept.is_some() {
                    return Err(TemplateError::UnexpectedFile(path.display().to_string()));
                }
                let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
                let t = MetaPromptTemplate { concept, kind, text };
                t.validate()?;
                reg.templates.insert((concept, kind), t);
            }
        }
        Ok(reg)
    }

    /// Writes every template under `dir` for editing.
    pub fn write_dir(&self, dir: &Path) -> Result<(), TemplateError> {
        for t in self.templates.values() {
            let path = dir.join(format!("{}.txt", t.key()));
            let parent = path.parent().expect("template path has a parent");
            std::fs::create_dir_all(parent).map_err(|e| TemplateError::Io {
                path: parent.display().to_string(),
                source: e,
            })?;
            std::fs::write(&path, &t.text).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        self.templates.values().try_for_each(MetaPromptTemplate::validate)
    }

    pub fn get(&self, concept: Option<ConceptFamily>, kind: TemplateKind) -> Result<&MetaPromptTemplate, TemplateError> {
        let concept = if kind.is_per_concept() { concept } else { None };
        self.templates
            .get(&(concept, kind))
            .ok_or_else(|| TemplateError::Missing(template_key(concept, kind)))
    }

    pub fn set(&mut self, template: MetaPromptTemplate) -> Result<(), TemplateError> {
        template.validate()?;
        self.templates.insert((template.concept, template.kind), template);
        Ok(())
    }

    pub fn render(
        &self,
        concept: Option<ConceptFamily>,
        kind: TemplateKind,
        values: &[(&str, String)],
    ) -> Result<String, TemplateError> {
        let t = self.get(concept, kind)?;
        if let Some(name) = kind.placeholders().iter().find(|n| !values.iter().any(|(k, _)| k == *n)) {
            return Err(TemplateError::MissingPlaceholder {
                key: t.key(),
                name: name.to_string(),
            });
        }
        Ok(t.render(values))
    }
}

/// What each family's prompts should exercise.
fn concept_guidance(c: ConceptFamily) -> &'static str {
    match c {
        ConceptFamily::Entities => {
            "Ask for objects through their category together with distinguishing attributes such as \
color, material, size or state, so that the attributes decide which instances qualify."
        }
        ConceptFamily::SpatialLayout => {
            "Ask for objects through where they are: containment, support, adjacency, ordering along \
an axis (for example the two leftmost items), depth, or grouping into rows and clusters."
        }
        ConceptFamily::RelationsEvents => {
            "Ask for objects through what they are doing or how they interact with something else: \
ongoing actions, tool use, possession, or roles within an event."
        }
        ConceptFamily::AffordancesFunctions => {
            "Ask for objects through what they can be used for: their usual function, uses that \
depend on the context of the scene, or improvised uses a person might find for them."
        }
        ConceptFamily::PhysicsSafety => {
            "Ask for objects through physical reasoning: stability, support, fragility, heat, \
sharpness, risk of falling or spilling, and what would be hazardous to touch or move."
        }
    }
}

fn default_text(concept: Option<ConceptFamily>, kind: TemplateKind) -> String {
    match kind {
        TemplateKind::Scene => "\
You are labeling an image for a segmentation dataset.
List between {min_regions} and {max_regions} distinct regions of the image. For each one write a \
single description of at most {max_words} words naming its category, its visible attributes, \
where it is in the frame, and how it relates to nearby objects.
Describe concrete, visible things only; each description must pick out exactly one region.
Answer with JSON only: {\"regions\": [\"description\", ...]}
"
        .into(),
        TemplateKind::MaskVerify => "\
The first image is the photo. The second image highlights one candidate region and its box.
Region description: \"{description}\"
Does the highlighted region show what the description says, with the right identity, the right \
attributes and the right location? Minor boundary errors are acceptable; a different object, a \
missing part of the object, or extra objects are not.
Answer with exactly one word: accept or reject.
"
        .into(),
        TemplateKind::MaskCompare => "\
The first image is the photo. The second image shows mask A and the third image shows mask B for \
the region \"{description}\".
Choose the mask that covers the region more completely, follows its boundary more closely and \
contains fewer holes or stray pixels.
Answer with JSON only: {\"choice\": \"A\"} or {\"choice\": \"B\"}
"
        .into(),
        TemplateKind::Positive => {
            let c = concept.expect("per-concept kind");
            format!(
                "\
You write segmentation requests that a person might say in conversation.
Concept family: {{concept}}
{}
The second image marks the known regions with numbered outlines. Their descriptions are:
{{descriptions}}
Write up to {{max_prompts}} requests for this concept. Each request must be answerable by \
selecting one or more of the numbered regions, and the selected regions must be exactly the ones \
it refers to. Prefer requests that need reasoning about the scene over naming an object outright; \
never write a request whose answer would include something that is not among the numbered regions.
Answer with JSON only: {{\"prompts\": [{{\"prompt\": \"...\", \"regions\": [1, 2]}}]}}
",
                concept_guidance(c)
            )
        }
        TemplateKind::AlignVerify => "\
The first image is the photo. The second image highlights a mask.
Prompt: \"{prompt}\"
Concept family: {concept}
Accept only if all three hold: the mask covers what the prompt asks for, the mask contains nothing \
the prompt does not ask for, and the prompt is a natural, unambiguous description of the masked \
content.
Answer with exactly one word: accept or reject.
"
        .into(),
        TemplateKind::NegativeGeneration => {
            let c = concept.expect("per-concept kind");
            format!(
                "\
You write adversarial segmentation requests that have no valid answer in this image.
Concept family: {{concept}}
{}
Regions present in the image:
{{descriptions}}
Write {{count}} requests in this concept family. Use two strategies: name objects that would be \
plausible in this scene but are absent, and describe objects that are present using attributes, \
states or relations they do not have. Every request must sound reasonable for the scene while \
matching nothing in it.
Answer with JSON only: {{\"prompts\": [\"...\", ...]}}
",
                concept_guidance(c)
            )
        }
        TemplateKind::NegativeVerification => "\
Look carefully at the image.
Prompt: \"{prompt}\"
Is there any region in the image that satisfies this prompt, even partially or under a loose \
reading? Answer accept if nothing in the image satisfies it, and reject if something does.
Answer with exactly one word: accept or reject.
"
        .into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_complete_and_valid() {
        let reg = TemplateRegistry::defaults();
        reg.validate().unwrap();
        for kind in TemplateKind::ALL {
            for c in ConceptFamily::ALL {
                assert!(reg.get(Some(c), kind).is_ok());
            }
        }
        let a = reg.get(Some(ConceptFamily::Entities), TemplateKind::Positive).unwrap();
        let b = reg.get(Some(ConceptFamily::PhysicsSafety), TemplateKind::Positive).unwrap();
        assert_ne!(a.text, b.text);
    }

    #[test]
    fn rendering_leaves_json_braces_alone() {
        let reg = TemplateRegistry::defaults();
        let out = reg
            .render(
                None,
                TemplateKind::Scene,
                &[
                    ("min_regions", "5".into()),
                    ("max_regions", "7".into()),
                    ("max_words", "15".into()),
                ],
            )
            .unwrap();
        assert!(out.contains("between 5 and 7"));
        assert!(out.contains("{\"regions\": [\"description\", ...]}"));
        assert!(reg.render(None, TemplateKind::Scene, &[("min_regions", "5".into())]).is_err());
    }

    #[test]
    fn missing_or_unknown_placeholders_are_rejected() {
        let t = MetaPromptTemplate {
            concept: None,
            kind: TemplateKind::MaskVerify,
            text: "no placeholder here".into(),
        };
        assert!(matches!(t.validate(), Err(TemplateError::MissingPlaceholder { .. })));
        let t = MetaPromptTemplate {
            text: "{description} {colour}".into(),
            ..t
        };
        assert!(matches!(t.validate(), Err(TemplateError::UnknownPlaceholder { .. })));
    }

    #[test]
    fn directory_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let reg = TemplateRegistry::defaults();
        reg.write_dir(dir.path()).unwrap();
        assert_eq!(TemplateRegistry::from_dir(dir.path()).unwrap(), reg);
        assert!(dir.path().join("affordances_functions/positive.txt").exists());
        assert!(dir.path().join("common/scene.txt").exists());

        std::fs::write(dir.path().join("common/mask_verify.txt"), "Is this {description}? accept/reject").unwrap();
        let edited = TemplateRegistry::from_dir(dir.path()).unwrap();
        assert_eq!(
            edited.get(None, TemplateKind::MaskVerify).unwrap().text,
            "Is this {description}? accept/reject"
        );

        std::fs::write(dir.path().join("common/scene.txt"), "describe the image").unwrap();
        assert!(TemplateRegistry::from_dir(dir.path()).is_err());
        std::fs::remove_file(dir.path().join("common/scene.txt")).unwrap();
        std::fs::write(dir.path().join("common/positive.txt"), "{concept} {descriptions} {max_prompts}").unwrap();
        assert!(matches!(
            TemplateRegistry::from_dir(dir.path()),
            Err(TemplateError::UnexpectedFile(_))
        ));
    }
}
