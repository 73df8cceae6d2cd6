//! Turn-scheduled rapport and exploration checks and the unmask policy.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, BackendError, ChatBackend, ChatMessage, GenerationParams, Respondent};
use crate::persona::{CognitiveDiagram, DifficultyPreset};
use crate::prompts::{PromptSet, PromptTemplate, TemplateError};
use crate::session::{Speaker, Utterance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediatorPolicy {
    pub rapport_interval: u32,
    pub exploration_interval: u32,
    pub score_threshold: u8,
    pub rapport_prompt: PromptTemplate,
    pub exploration_prompt: PromptTemplate,
}

impl MediatorPolicy {
    pub const DEFAULT_THRESHOLD: u8 = 4;

    /// Intervals from the preset, default threshold and prompts.
    pub fn for_preset(preset: &DifficultyPreset) -> Self {
        let prompts = PromptSet::default();
        Self::from_prompts(preset, &prompts)
    }

    pub fn from_prompts(preset: &DifficultyPreset, prompts: &PromptSet) -> Self {
        Self {
            rapport_interval: preset.rapport_interval,
            exploration_interval: preset.exploration_interval,
            score_threshold: Self::DEFAULT_THRESHOLD,
            rapport_prompt: prompts.rapport.clone(),
            exploration_prompt: prompts.exploration.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rapport_interval == 0 || self.exploration_interval == 0 {
            return Err("check intervals must be at least 1".into());
        }
        if !(1..=5).contains(&self.score_threshold) {
            return Err(format!(
                "score_threshold must be in 1..=5, got {}",
                self.score_threshold
            ));
        }
        Ok(())
    }

    pub fn passes(&self, verdict: &VerdictScore) -> bool {
        verdict.value >= self.score_threshold
    }
}

pub fn should_check_rapport(turn: u32, policy: &MediatorPolicy) -> bool {
    turn >= 1 && turn.is_multiple_of(policy.rapport_interval)
}

pub fn should_check_exploration(turn: u32, policy: &MediatorPolicy) -> bool {
    turn >= 1 && turn.is_multiple_of(policy.exploration_interval)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictScore {
    pub value: u8,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} (raw judge output: {raw:?})")]
pub struct VerdictParseError {
    pub message: String,
    pub raw: String,
}

static RATING_LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)[*_]*\[?\brating\]?[*_]*\s*:[*_\s]*").expect("static regex")
});
static RATING_VALUE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?\d+(?:[.,]\d+)?").expect("static regex"));
static JUSTIFICATION_LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)[*_]*\[?\bjustification\]?[*_]*\s*:").expect("static regex")
});

/// Reads the first integer after a `Rating:` or `[Rating]:` label.
pub fn parse_verdict(raw: &str) -> Result<VerdictScore, VerdictParseError> {
    let fail = |message: &str| VerdictParseError {
        message: message.to_string(),
        raw: raw.to_string(),
    };
    let label = RATING_LABEL
        .find(raw)
        .ok_or_else(|| fail("no rating label"))?;
    let rest = &raw[label.end()..];
    let number = RATING_VALUE
        .find(rest)
        .ok_or_else(|| fail("rating label is not followed by a number"))?;
    let token = number.as_str();
    // "4,5" is a decimal comma only when followed by digits; "4, because" is fine.
    if token.contains('.') || token.contains(',') {
        return Err(fail("rating is not an integer"));
    }
    let value: i64 = token
        .parse()
        .map_err(|_| fail("rating is out of range"))?;
    if !(1..=5).contains(&value) {
        return Err(fail("rating is outside 1..=5"));
    }
    let justification = match JUSTIFICATION_LABEL.find(raw) {
        Some(m) => raw[m.end()..].trim(),
        None => rest[number.end()..].trim(),
    };
    Ok(VerdictScore {
        value: value as u8,
        justification: justification.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictFormat {
    /// `Rating: 4` followed by free text.
    Plain,
    /// `[Rating]: 4` and `[Justification]: ...` lines.
    Bracketed,
}

pub fn format_verdict(verdict: &VerdictScore, format: VerdictFormat) -> String {
    match format {
        VerdictFormat::Plain => format!("Rating: {}\n{}", verdict.value, verdict.justification),
        VerdictFormat::Bracketed => format!(
            "[Rating]: {}\n[Justification]: {}",
            verdict.value, verdict.justification
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Backend(#[from] BackendError),
    #[error("could not parse judge verdict: {0}")]
    Parse(#[from] VerdictParseError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Judgment {
    pub verdict: VerdictScore,
    pub raw: String,
}

/// `Therapist: ...` / `Client: ...` lines in order.
pub fn format_dialogue(dialogue: &[Utterance]) -> String {
    dialogue
        .iter()
        .map(|u| {
            let who = match u.speaker {
                Speaker::Therapist => "Therapist",
                Speaker::Client => "Client",
            };
            format!("{who}: {}", u.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn judge_with(
    template: &PromptTemplate,
    dialogue: &[Utterance],
    backend: &dyn ChatBackend,
    params: &GenerationParams,
) -> Result<Judgment, JudgeError> {
    let text = format_dialogue(dialogue);
    let prompt = template.render_pairs(&[
        ("dialogue_context", &text),
        ("dialogue_history", &text),
        ("conversation", &text),
    ])?;
    let raw = backends::complete(backend, &[ChatMessage::system(prompt)], params, Respondent::Judge)?;
    let verdict = parse_verdict(&raw)?;
    Ok(Judgment { verdict, raw })
}

pub fn judge_rapport(
    dialogue: &[Utterance],
    backend: &dyn ChatBackend,
    policy: &MediatorPolicy,
    params: &GenerationParams,
) -> Result<Judgment, JudgeError> {
    judge_with(&policy.rapport_prompt, dialogue, backend, params)
}

pub fn judge_exploration(
    dialogue: &[Utterance],
    backend: &dyn ChatBackend,
    policy: &MediatorPolicy,
    params: &GenerationParams,
) -> Result<Judgment, JudgeError> {
    judge_with(&policy.exploration_prompt, dialogue, backend, params)
}

/// Runs `judge` once more after a backend or parse failure. Template errors
/// are returned immediately.
pub fn with_one_retry(
    mut judge: impl FnMut() -> Result<Judgment, JudgeError>,
) -> Result<Judgment, JudgeError> {
    match judge() {
        Ok(j) => Ok(j),
        Err(e @ JudgeError::Template(_)) => Err(e),
        Err(first) => {
            log::warn!("judge call failed, retrying once: {first}");
            judge()
        }
    }
}

pub fn apply_rapport_verdict(
    diagram: &CognitiveDiagram,
    verdict: &VerdictScore,
    policy: &MediatorPolicy,
) -> CognitiveDiagram {
    if policy.passes(verdict) {
        diagram.unmask_next_external()
    } else {
        diagram.clone()
    }
}

pub fn apply_exploration_verdict(
    diagram: &CognitiveDiagram,
    verdict: &VerdictScore,
    policy: &MediatorPolicy,
) -> CognitiveDiagram {
    if policy.passes(verdict) {
        diagram.unmask_internal()
    } else {
        diagram.clone()
    }
}
