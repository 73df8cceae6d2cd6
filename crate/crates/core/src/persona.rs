//! Cognitive-diagram data model, persona ingestion and mask transitions.
//!
//! A [`CognitiveDiagram`] holds the client's internal elements (histories,
//! beliefs, coping strategies) and exactly three external experience
//! bundles. Every transition returns a new diagram; nothing is ever
//! re-masked.

use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token substituted for every masked field in the client prompt.
pub const MASK_TOKEN: &str = "unknown";

static MASK_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bunknown\b").expect("static regex"));

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("cannot read persona file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PersonaError {
    fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        PersonaError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    RelevantHistory,
    CoreBelief,
    IntermediateBelief,
    CopingStrategy,
    Situation,
    AutomaticThought,
    Emotion,
    Behavior,
}

impl ElementKind {
    pub const INTERNAL: [ElementKind; 4] = [
        ElementKind::RelevantHistory,
        ElementKind::CoreBelief,
        ElementKind::IntermediateBelief,
        ElementKind::CopingStrategy,
    ];

    pub const EXTERNAL: [ElementKind; 4] = [
        ElementKind::Situation,
        ElementKind::AutomaticThought,
        ElementKind::Emotion,
        ElementKind::Behavior,
    ];

    pub fn is_internal(self) -> bool {
        matches!(
            self,
            ElementKind::RelevantHistory
                | ElementKind::CoreBelief
                | ElementKind::IntermediateBelief
                | ElementKind::CopingStrategy
        )
    }

    pub fn is_external(self) -> bool {
        !self.is_internal()
    }

    /// Snake-case tag used in files and reports.
    pub fn tag(self) -> &'static str {
        match self {
            ElementKind::RelevantHistory => "relevant_history",
            ElementKind::CoreBelief => "core_belief",
            ElementKind::IntermediateBelief => "intermediate_belief",
            ElementKind::CopingStrategy => "coping_strategy",
            ElementKind::Situation => "situation",
            ElementKind::AutomaticThought => "automatic_thought",
            ElementKind::Emotion => "emotion",
            ElementKind::Behavior => "behavior",
        }
    }

    /// Column abbreviation for internal kinds (RH, CB, IB, CS).
    pub fn abbreviation(self) -> &'static str {
        match self {
            ElementKind::RelevantHistory => "RH",
            ElementKind::CoreBelief => "CB",
            ElementKind::IntermediateBelief => "IB",
            ElementKind::CopingStrategy => "CS",
            ElementKind::Situation => "SI",
            ElementKind::AutomaticThought => "AT",
            ElementKind::Emotion => "EM",
            ElementKind::Behavior => "BE",
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskState {
    Masked,
    Unmasked,
}

impl MaskState {
    pub fn is_masked(self) -> bool {
        self == MaskState::Masked
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CognitiveElement {
    pub kind: ElementKind,
    pub text: String,
    pub mask: MaskState,
}

impl CognitiveElement {
    pub fn new(kind: ElementKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
            mask: MaskState::Unmasked,
        }
    }

    pub fn is_masked(&self) -> bool {
        self.mask.is_masked()
    }
}

/// One previous experience: a situation and the client's reactions to it.
/// The four constituents are disclosed together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceBundle {
    pub index: u8,
    pub situation: CognitiveElement,
    pub automatic_thought: CognitiveElement,
    pub emotion: CognitiveElement,
    pub behavior: CognitiveElement,
}

impl ExperienceBundle {
    pub fn new(
        index: u8,
        situation: impl Into<String>,
        automatic_thought: impl Into<String>,
        emotion: impl Into<String>,
        behavior: impl Into<String>,
    ) -> Self {
        Self {
            index,
            situation: CognitiveElement::new(ElementKind::Situation, situation),
            automatic_thought: CognitiveElement::new(
                ElementKind::AutomaticThought,
                automatic_thought,
            ),
            emotion: CognitiveElement::new(ElementKind::Emotion, emotion),
            behavior: CognitiveElement::new(ElementKind::Behavior, behavior),
        }
    }

    pub fn elements(&self) -> [&CognitiveElement; 4] {
        [
            &self.situation,
            &self.automatic_thought,
            &self.emotion,
            &self.behavior,
        ]
    }

    /// Shared mask state of the bundle, or `None` if the constituents disagree.
    pub fn mask(&self) -> Option<MaskState> {
        let state = self.situation.mask;
        self.elements()
            .iter()
            .all(|e| e.mask == state)
            .then_some(state)
    }

    pub fn is_unmasked(&self) -> bool {
        self.mask() == Some(MaskState::Unmasked)
    }

    fn set_mask(&mut self, mask: MaskState) {
        self.situation.mask = mask;
        self.automatic_thought.mask = mask;
        self.emotion.mask = mask;
        self.behavior.mask = mask;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureStatus {
    pub external_revealed: bool,
    pub internal_revealed: bool,
    pub full_revealed: bool,
}

impl ExposureStatus {
    pub fn new(external_revealed: bool, internal_revealed: bool) -> Self {
        Self {
            external_revealed,
            internal_revealed,
            full_revealed: external_revealed && internal_revealed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CognitiveDiagram {
    pub internal: Vec<CognitiveElement>,
    pub external: [ExperienceBundle; 3],
}

impl CognitiveDiagram {
    /// Builds a diagram and checks its structural invariants. All elements
    /// keep the mask state they were given.
    pub fn new(
        internal: Vec<CognitiveElement>,
        external: [ExperienceBundle; 3],
    ) -> Result<Self, PersonaError> {
        let diagram = Self { internal, external };
        diagram.validate()?;
        Ok(diagram)
    }

    pub fn validate(&self) -> Result<(), PersonaError> {
        for kind in ElementKind::INTERNAL {
            if !self.internal.iter().any(|e| e.kind == kind) {
                return Err(PersonaError::schema(
                    format!("internal.{}", plural_field(kind)),
                    "expected at least one element",
                ));
            }
        }
        if let Some(e) = self.internal.iter().find(|e| e.kind.is_external()) {
            return Err(PersonaError::schema(
                "internal",
                format!("external kind `{}` in internal diagram", e.kind),
            ));
        }
        for (pos, bundle) in self.external.iter().enumerate() {
            if usize::from(bundle.index) != pos + 1 {
                return Err(PersonaError::schema(
                    format!("experiences[{pos}]"),
                    format!("expected index {}, found {}", pos + 1, bundle.index),
                ));
            }
            let kinds_ok = bundle
                .elements()
                .iter()
                .zip(ElementKind::EXTERNAL)
                .all(|(e, k)| e.kind == k);
            if !kinds_ok {
                return Err(PersonaError::schema(
                    format!("experiences[{pos}]"),
                    "constituent kinds do not match their fields",
                ));
            }
        }
        Ok(())
    }

    /// Number of unmasked experience bundles.
    pub fn accessible_count(&self) -> usize {
        self.external.iter().filter(|b| b.is_unmasked()).count()
    }

    pub fn internal_elements(&self, kind: ElementKind) -> impl Iterator<Item = &CognitiveElement> {
        self.internal.iter().filter(move |e| e.kind == kind)
    }

    pub fn internal_masked(&self) -> bool {
        self.internal.iter().any(|e| e.is_masked())
    }

    /// Every element, internal first then bundle by bundle.
    pub fn elements(&self) -> impl Iterator<Item = &CognitiveElement> {
        self.internal
            .iter()
            .chain(self.external.iter().flat_map(|b| b.elements()))
    }

    /// Masks every internal element and leaves only the `accessible`
    /// lowest-index bundles unmasked.
    pub fn masked_with(&self, accessible: usize) -> Self {
        let mut next = self.clone();
        for e in &mut next.internal {
            e.mask = MaskState::Masked;
        }
        for (pos, bundle) in next.external.iter_mut().enumerate() {
            bundle.set_mask(if pos < accessible {
                MaskState::Unmasked
            } else {
                MaskState::Masked
            });
        }
        next
    }

    /// Index of the bundle the next external unmask would reveal.
    pub fn next_masked_bundle(&self) -> Option<u8> {
        self.external
            .iter()
            .find(|b| !b.is_unmasked())
            .map(|b| b.index)
    }

    /// Unmasks the lowest-index masked bundle; unchanged when all three are
    /// already accessible.
    pub fn unmask_next_external(&self) -> Self {
        match self.next_masked_bundle() {
            Some(index) => self.unmask_bundle(index),
            None => self.clone(),
        }
    }

    /// Unmasks one specific bundle. Unknown indices leave the diagram as is.
    pub fn unmask_bundle(&self, index: u8) -> Self {
        let mut next = self.clone();
        if let Some(bundle) = next.external.iter_mut().find(|b| b.index == index) {
            bundle.set_mask(MaskState::Unmasked);
        }
        next
    }

    /// Unmasks every internal element at once; external bundles are untouched.
    pub fn unmask_internal(&self) -> Self {
        let mut next = self.clone();
        for e in &mut next.internal {
            e.mask = MaskState::Unmasked;
        }
        next
    }

    pub fn exposure_status(&self) -> ExposureStatus {
        ExposureStatus::new(
            self.external.iter().all(|b| b.is_unmasked()),
            self.internal.iter().all(|e| !e.is_masked()),
        )
    }

    /// Texts of every currently masked element.
    pub fn masked_texts(&self) -> Vec<&str> {
        self.elements()
            .filter(|e| e.is_masked())
            .map(|e| e.text.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraitLevel {
    Low,
    High,
}

impl fmt::Display for TraitLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraitLevel::Low => "low",
            TraitLevel::High => "high",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntakeInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub name: String,
    pub traits: Vec<String>,
    pub openness: TraitLevel,
    pub metacognition: TraitLevel,
    pub intake: IntakeInfo,
    pub diagram: CognitiveDiagram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Normal,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Normal, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Normal => "normal",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "normal" => Ok(Difficulty::Normal),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown preset `{other}` (expected easy, normal or hard)")),
        }
    }
}

/// Session difficulty: how many bundles start accessible and how often the
/// mediator runs each check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyPreset {
    pub label: Difficulty,
    pub initial_accessible: u8,
    pub exploration_interval: u32,
    pub rapport_interval: u32,
}

impl DifficultyPreset {
    pub const DEFAULT_RAPPORT_INTERVAL: u32 = 4;

    pub fn easy() -> Self {
        Self {
            label: Difficulty::Easy,
            initial_accessible: 3,
            exploration_interval: 1,
            rapport_interval: Self::DEFAULT_RAPPORT_INTERVAL,
        }
    }

    pub fn normal() -> Self {
        Self {
            label: Difficulty::Normal,
            initial_accessible: 2,
            exploration_interval: 2,
            rapport_interval: Self::DEFAULT_RAPPORT_INTERVAL,
        }
    }

    pub fn hard() -> Self {
        Self {
            label: Difficulty::Hard,
            initial_accessible: 1,
            exploration_interval: 3,
            rapport_interval: Self::DEFAULT_RAPPORT_INTERVAL,
        }
    }

    pub fn for_label(label: Difficulty) -> Self {
        match label {
            Difficulty::Easy => Self::easy(),
            Difficulty::Normal => Self::normal(),
            Difficulty::Hard => Self::hard(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(1..=3).contains(&self.initial_accessible) {
            return Err(format!(
                "initial_accessible must be in 1..=3, got {}",
                self.initial_accessible
            ));
        }
        if self.exploration_interval == 0 || self.rapport_interval == 0 {
            return Err("check intervals must be at least 1".into());
        }
        Ok(())
    }
}

/// Starting state: every internal element masked, the first
/// `preset.initial_accessible` bundles accessible.
pub fn initialize_mask(profile: &ClientProfile, preset: &DifficultyPreset) -> CognitiveDiagram {
    profile
        .diagram
        .masked_with(usize::from(preset.initial_accessible.min(3)))
}

// ---------------------------------------------------------------------------
// Persona file format
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PersonaDocument {
    name: String,
    #[serde(default)]
    traits: Vec<String>,
    openness: TraitLevel,
    metacognition: TraitLevel,
    intake: IntakeDocument,
    internal: InternalDocument,
    experiences: Vec<ExperienceDocument>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct IntakeDocument {
    #[serde(default)]
    age: Option<u32>,
    #[serde(default)]
    job: Option<String>,
    reason: String,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct InternalDocument {
    relevant_histories: Vec<String>,
    core_beliefs: Vec<String>,
    intermediate_beliefs: Vec<String>,
    coping_strategies: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ExperienceDocument {
    situation: String,
    automatic_thought: String,
    emotion: String,
    behavior: String,
}

fn plural_field(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::RelevantHistory => "relevant_histories",
        ElementKind::CoreBelief => "core_beliefs",
        ElementKind::IntermediateBelief => "intermediate_beliefs",
        ElementKind::CopingStrategy => "coping_strategies",
        ElementKind::Situation => "situation",
        ElementKind::AutomaticThought => "automatic_thought",
        ElementKind::Emotion => "emotion",
        ElementKind::Behavior => "behavior",
    }
}

fn checked_text(field: &str, text: &str) -> Result<String, PersonaError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(PersonaError::schema(field, "text must not be empty"));
    }
    if MASK_WORD.is_match(trimmed) {
        return Err(PersonaError::schema(
            field,
            format!("contains the reserved mask token `{MASK_TOKEN}`"),
        ));
    }
    Ok(trimmed.to_string())
}

/// Parses one persona document (JSON). Every element starts unmasked.
pub fn load_profile(document: &str) -> Result<ClientProfile, PersonaError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let doc: PersonaDocument = serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        PersonaError::Parse {
            field: if path == "." { "<document>".into() } else { path },
            message: err.into_inner().to_string(),
        }
    })?;
    profile_from_document(doc)
}

pub fn load_profile_file(path: &Path) -> Result<ClientProfile, PersonaError> {
    let text = std::fs::read_to_string(path).map_err(|source| PersonaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_profile(&text)
}

fn profile_from_document(doc: PersonaDocument) -> Result<ClientProfile, PersonaError> {
    let name = checked_text("name", &doc.name)?;
    let reason = checked_text("intake.reason", &doc.intake.reason)?;
    let job = match doc.intake.job {
        Some(job) if !job.trim().is_empty() => Some(checked_text("intake.job", &job)?),
        _ => None,
    };
    let traits = doc
        .traits
        .iter()
        .enumerate()
        .map(|(i, t)| checked_text(&format!("traits[{i}]"), t))
        .collect::<Result<Vec<_>, _>>()?;

    let groups = [
        (ElementKind::RelevantHistory, &doc.internal.relevant_histories),
        (ElementKind::CoreBelief, &doc.internal.core_beliefs),
        (ElementKind::IntermediateBelief, &doc.internal.intermediate_beliefs),
        (ElementKind::CopingStrategy, &doc.internal.coping_strategies),
    ];
    let mut internal = Vec::new();
    for (kind, texts) in groups {
        let field = format!("internal.{}", plural_field(kind));
        if texts.is_empty() {
            return Err(PersonaError::schema(field, "expected at least one element"));
        }
        for (i, text) in texts.iter().enumerate() {
            internal.push(CognitiveElement::new(
                kind,
                checked_text(&format!("{field}[{i}]"), text)?,
            ));
        }
    }

    if doc.experiences.len() != 3 {
        return Err(PersonaError::schema(
            "experiences",
            format!("expected 3, found {}", doc.experiences.len()),
        ));
    }
    let mut bundles = Vec::with_capacity(3);
    for (i, exp) in doc.experiences.iter().enumerate() {
        let field = |name: &str| format!("experiences[{i}].{name}");
        bundles.push(ExperienceBundle::new(
            (i + 1) as u8,
            checked_text(&field("situation"), &exp.situation)?,
            checked_text(&field("automatic_thought"), &exp.automatic_thought)?,
            checked_text(&field("emotion"), &exp.emotion)?,
            checked_text(&field("behavior"), &exp.behavior)?,
        ));
    }
    let external: [ExperienceBundle; 3] = bundles
        .try_into()
        .map_err(|_| PersonaError::schema("experiences", "expected 3"))?;

    Ok(ClientProfile {
        name,
        traits,
        openness: doc.openness,
        metacognition: doc.metacognition,
        intake: IntakeInfo {
            age: doc.intake.age,
            job,
            reason,
        },
        diagram: CognitiveDiagram::new(internal, external)?,
    })
}

/// Serializes a profile back into the persona file format.
pub fn profile_document(profile: &ClientProfile) -> String {
    let texts = |kind| {
        profile
            .diagram
            .internal_elements(kind)
            .map(|e| e.text.clone())
            .collect::<Vec<_>>()
    };
    let doc = PersonaDocument {
        name: profile.name.clone(),
        traits: profile.traits.clone(),
        openness: profile.openness,
        metacognition: profile.metacognition,
        intake: IntakeDocument {
            age: profile.intake.age,
            job: profile.intake.job.clone(),
            reason: profile.intake.reason.clone(),
        },
        internal: InternalDocument {
            relevant_histories: texts(ElementKind::RelevantHistory),
            core_beliefs: texts(ElementKind::CoreBelief),
            intermediate_beliefs: texts(ElementKind::IntermediateBelief),
            coping_strategies: texts(ElementKind::CopingStrategy),
        },
        experiences: profile
            .diagram
            .external
            .iter()
            .map(|b| ExperienceDocument {
                situation: b.situation.text.clone(),
                automatic_thought: b.automatic_thought.text.clone(),
                emotion: b.emotion.text.clone(),
                behavior: b.behavior.text.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("persona document serializes")
}

// ---------------------------------------------------------------------------
// Client-facing rendering
// ---------------------------------------------------------------------------

fn render_field(elements: &[&CognitiveElement]) -> String {
    if elements.iter().any(|e| e.is_masked()) {
        MASK_TOKEN.to_string()
    } else {
        elements
            .iter()
            .map(|e| e.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn render_reactions(bundle: &ExperienceBundle) -> String {
    if bundle.is_unmasked() {
        format!(
            "Automatic thought: {} Emotion: {} Behavior: {}",
            bundle.automatic_thought.text, bundle.emotion.text, bundle.behavior.text
        )
    } else {
        MASK_TOKEN.to_string()
    }
}

/// Case synopsis, conceptualization diagram and previous experiences as the
/// client simulator sees them. Masked fields render as [`MASK_TOKEN`].
pub fn render_accessible(profile: &ClientProfile, diagram: &CognitiveDiagram) -> String {
    let mut out = String::new();
    out.push_str("CASE SYNOPSIS\n");
    out.push_str("Patient Details:\n");
    out.push_str(&format!("Name: {}\n", profile.name));
    out.push_str("Cognitive Traits:\n");
    out.push_str(&format!("  Openness: {}\n", profile.openness));
    out.push_str(&format!("  Metacognition: {}\n", profile.metacognition));
    out.push('\n');
    out.push_str("COGNITIVE CONCEPTUALIZATION DIAGRAM\n");
    let labels = [
        (ElementKind::RelevantHistory, "Relevant Histories"),
        (ElementKind::CoreBelief, "Core Beliefs"),
        (ElementKind::IntermediateBelief, "Intermediate Beliefs"),
        (ElementKind::CopingStrategy, "Coping Strategies"),
    ];
    for (kind, label) in labels {
        let elements: Vec<_> = diagram.internal_elements(kind).collect();
        out.push_str(&format!("{label}: {}\n", render_field(&elements)));
    }
    for bundle in &diagram.external {
        out.push('\n');
        out.push_str(&format!("PREVIOUS EXPERIENCE {}\n", bundle.index));
        out.push_str(&format!(
            "Situation: {}\n",
            render_field(&[&bundle.situation])
        ));
        out.push_str(&format!("Reactions: {}\n", render_reactions(bundle)));
    }
    out
}
