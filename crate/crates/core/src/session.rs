//! One counseling session: prompt assembly, alternating turns, scheduled
//! mediation and termination.

use std::fmt;
use std::sync::LazyLock;

use chrono::{DateTime, TimeZone, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, BackendError, ChatBackend, ChatMessage, GenerationParams, Respondent};
use crate::mediator::{self, JudgeError, Judgment, MediatorPolicy};
use crate::persona::{initialize_mask, render_accessible, ClientProfile, CognitiveDiagram, DifficultyPreset};
use crate::prompts::{PromptSet, PromptTemplate, TemplateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Therapist,
    Client,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::Therapist => "Therapist",
            Speaker::Client => "Client",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub turn: u32,
    pub speaker: Speaker,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

impl Utterance {
    /// Utterance stamped with the logical clock at `tick`.
    pub fn logical(turn: u32, speaker: Speaker, text: impl Into<String>, tick: u64) -> Self {
        Self {
            turn,
            speaker,
            text: text.into(),
            timestamp: logical_instant(tick),
        }
    }
}

/// How utterances are timestamped. Logical time makes transcripts of
/// scripted runs byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Wall,
    Logical,
}

fn logical_instant(tick: u64) -> DateTime<Utc> {
    let epoch = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
    epoch + chrono::Duration::seconds(tick as i64)
}

struct Clock {
    mode: ClockMode,
    tick: u64,
}

impl Clock {
    fn now(&mut self) -> DateTime<Utc> {
        let tick = self.tick;
        self.tick += 1;
        match self.mode {
            ClockMode::Wall => Utc::now(),
            ClockMode::Logical => logical_instant(tick),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Rapport,
    Exploration,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckKind::Rapport => "rapport",
            CheckKind::Exploration => "exploration",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Farewell,
    ClientDone,
    MaxTurns,
    /// Only on partial records of sessions that failed mid-dialogue.
    Aborted,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Farewell => "farewell",
            Termination::ClientDone => "client_done",
            Termination::MaxTurns => "max_turns",
            Termination::Aborted => "aborted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub score: u8,
    pub justification: String,
    pub raw: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    RapportCheck(CheckOutcome),
    ExplorationCheck(CheckOutcome),
    UnmaskExternal { bundle_index: u8 },
    UnmaskInternal,
    CheckSkipped { check: CheckKind, reason: String },
    Termination { reason: Termination },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::RapportCheck(_) => "rapport_check",
            EventKind::ExplorationCheck(_) => "exploration_check",
            EventKind::UnmaskExternal { .. } => "unmask_external",
            EventKind::UnmaskInternal => "unmask_internal",
            EventKind::CheckSkipped { .. } => "check_skipped",
            EventKind::Termination { .. } => "termination",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub turn: u32,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub max_turns: u32,
    pub preset: DifficultyPreset,
    pub mediator: MediatorPolicy,
    pub therapist_params: GenerationParams,
    pub client_params: GenerationParams,
    pub judge_params: GenerationParams,
    /// Labels the run; sessions of one cell differ only by seed.
    pub seed: u64,
    /// Phrase the client is told to emit when it wants to end. Empty disables.
    pub closing_marker: String,
    /// Let the therapist speak once more after the cap to say goodbye.
    pub allow_farewell_past_cap: bool,
    pub clock: ClockMode,
    pub therapist_prompt: PromptTemplate,
    pub client_prompt: PromptTemplate,
}

impl SessionConfig {
    pub const DEFAULT_MAX_TURNS: u32 = 15;
    pub const DEFAULT_CLOSING_MARKER: &'static str = "[SESSION_END]";

    pub fn new(preset: DifficultyPreset) -> Self {
        Self::with_prompts(preset, &PromptSet::default())
    }

    pub fn with_prompts(preset: DifficultyPreset, prompts: &PromptSet) -> Self {
        Self {
            max_turns: Self::DEFAULT_MAX_TURNS,
            preset,
            mediator: MediatorPolicy::from_prompts(&preset, prompts),
            therapist_params: GenerationParams::default(),
            client_params: GenerationParams::default(),
            judge_params: GenerationParams::default(),
            seed: 0,
            closing_marker: Self::DEFAULT_CLOSING_MARKER.into(),
            allow_farewell_past_cap: false,
            clock: ClockMode::Wall,
            therapist_prompt: prompts.therapist.clone(),
            client_prompt: prompts.client.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_turns == 0 {
            return Err("max_turns must be at least 1".into());
        }
        self.preset.validate()?;
        self.mediator.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub profile_ref: String,
    pub profile: ClientProfile,
    pub config: SessionConfig,
    pub transcript: Vec<Utterance>,
    pub events: Vec<SessionEvent>,
    pub final_diagram: CognitiveDiagram,
    pub termination: Termination,
}

impl SessionRecord {
    /// Number of completed therapist+client exchanges.
    pub fn completed_turns(&self) -> u32 {
        completed_turns(&self.transcript)
    }

    pub fn client_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.transcript.iter().filter(|u| u.speaker == Speaker::Client)
    }

    pub fn therapist_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.transcript
            .iter()
            .filter(|u| u.speaker == Speaker::Therapist)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("session aborted at turn {turn}: {source}")]
    Aborted {
        turn: u32,
        source: BackendError,
        partial: Box<SessionRecord>,
    },
}

fn completed_turns(transcript: &[Utterance]) -> u32 {
    transcript
        .iter()
        .filter(|u| u.speaker == Speaker::Client)
        .count() as u32
}

static NON_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[^\p{L}\p{N}\s]").expect("static regex"));

/// Case-insensitive "goodbye" match that ignores punctuation, so
/// "Good-bye!" and "GOODBYE." both count.
pub fn is_farewell(text: &str) -> bool {
    NON_WORD
        .replace_all(&text.to_lowercase(), "")
        .contains("goodbye")
}

pub fn check_termination(transcript: &[Utterance], config: &SessionConfig) -> Option<Termination> {
    let last_therapist = transcript.iter().rev().find(|u| u.speaker == Speaker::Therapist);
    if let Some(u) = last_therapist {
        let answered = transcript.last().is_some_and(|l| l.speaker == Speaker::Client);
        if !answered && is_farewell(&u.text) {
            return Some(Termination::Farewell);
        }
    }
    if !config.closing_marker.is_empty() {
        if let Some(last) = transcript.last().filter(|u| u.speaker == Speaker::Client) {
            if last
                .text
                .to_lowercase()
                .contains(&config.closing_marker.to_lowercase())
            {
                return Some(Termination::ClientDone);
            }
        }
    }
    if completed_turns(transcript) >= config.max_turns {
        return Some(Termination::MaxTurns);
    }
    None
}

fn closing_instruction(marker: &str) -> String {
    if marker.is_empty() {
        String::new()
    } else {
        format!(
            "If you feel the conversation has reached a natural end and you want to finish the session, end your reply with {marker}."
        )
    }
}

/// System message for the client simulator at the current mask state.
pub fn build_client_prompt(
    profile: &ClientProfile,
    diagram: &CognitiveDiagram,
    config: &SessionConfig,
) -> Result<Vec<ChatMessage>, TemplateError> {
    let text = config.client_prompt.render_pairs(&[
        ("accessible_diagram", &render_accessible(profile, diagram)),
        ("client_name", &profile.name),
        ("closing_instruction", &closing_instruction(&config.closing_marker)),
    ])?;
    Ok(vec![ChatMessage::system(text.trim_end())])
}

/// Intake-form fields only; nothing from the diagram.
pub fn intake_form(profile: &ClientProfile) -> String {
    let mut lines = vec![format!("Name: {}", profile.name)];
    if let Some(age) = profile.intake.age {
        lines.push(format!("Age: {age}"));
    }
    if let Some(job) = &profile.intake.job {
        lines.push(format!("Job: {job}"));
    }
    lines.push(format!("Reason for counseling: {}", profile.intake.reason));
    lines.join("\n")
}

pub fn build_therapist_prompt(
    profile: &ClientProfile,
    config: &SessionConfig,
) -> Result<Vec<ChatMessage>, TemplateError> {
    let text = config
        .therapist_prompt
        .render_pairs(&[("intake_form", &intake_form(profile))])?;
    Ok(vec![ChatMessage::system(text.trim_end())])
}

fn with_history(mut messages: Vec<ChatMessage>, transcript: &[Utterance]) -> Vec<ChatMessage> {
    messages.extend(transcript.iter().map(|u| match u.speaker {
        Speaker::Therapist => ChatMessage::therapist(&u.text),
        Speaker::Client => ChatMessage::client(&u.text),
    }));
    messages
}

/// Masked element texts that occur verbatim in any of `messages`.
pub fn masked_leaks(messages: &[ChatMessage], diagram: &CognitiveDiagram) -> Vec<String> {
    diagram
        .masked_texts()
        .into_iter()
        .filter(|text| messages.iter().any(|m| m.content.contains(text)))
        .map(str::to_string)
        .collect()
}

/// Applies the unmask events of `events` to `initial`, in order.
pub fn fold_events(initial: &CognitiveDiagram, events: &[SessionEvent]) -> CognitiveDiagram {
    events.iter().fold(initial.clone(), |d, e| match e.kind {
        EventKind::UnmaskExternal { bundle_index } => d.unmask_bundle(bundle_index),
        EventKind::UnmaskInternal => d.unmask_internal(),
        _ => d,
    })
}

struct Run<'a> {
    profile: &'a ClientProfile,
    config: &'a SessionConfig,
    diagram: CognitiveDiagram,
    transcript: Vec<Utterance>,
    events: Vec<SessionEvent>,
    clock: Clock,
}

impl Run<'_> {
    fn record(self, termination: Termination) -> SessionRecord {
        SessionRecord {
            profile_ref: self.profile.name.clone(),
            profile: self.profile.clone(),
            config: self.config.clone(),
            transcript: self.transcript,
            events: self.events,
            final_diagram: self.diagram,
            termination,
        }
    }

    fn abort(self, turn: u32, source: BackendError) -> SessionError {
        SessionError::Aborted {
            turn,
            source,
            partial: Box::new(self.record(Termination::Aborted)),
        }
    }

    fn say(&mut self, turn: u32, speaker: Speaker, text: String) {
        let timestamp = self.clock.now();
        self.transcript.push(Utterance {
            turn,
            speaker,
            text,
            timestamp,
        });
    }

    fn event(&mut self, turn: u32, kind: EventKind) {
        self.events.push(SessionEvent { turn, kind });
    }

    fn check(&mut self, turn: u32, check: CheckKind, judge: &dyn ChatBackend) {
        let policy = &self.config.mediator;
        let params = &self.config.judge_params;
        let transcript = &self.transcript;
        let result: Result<Judgment, JudgeError> = mediator::with_one_retry(|| match check {
            CheckKind::Rapport => mediator::judge_rapport(transcript, judge, policy, params),
            CheckKind::Exploration => mediator::judge_exploration(transcript, judge, policy, params),
        });
        let judgment = match result {
            Ok(j) => j,
            Err(e) => {
                log::warn!("{check} check skipped at turn {turn}: {e}");
                self.event(
                    turn,
                    EventKind::CheckSkipped {
                        check,
                        reason: e.to_string(),
                    },
                );
                return;
            }
        };
        let passed = policy.passes(&judgment.verdict);
        let outcome = CheckOutcome {
            score: judgment.verdict.value,
            justification: judgment.verdict.justification.clone(),
            raw: judgment.raw,
            passed,
        };
        let next = match check {
            CheckKind::Rapport => {
                self.event(turn, EventKind::RapportCheck(outcome));
                mediator::apply_rapport_verdict(&self.diagram, &judgment.verdict, policy)
            }
            CheckKind::Exploration => {
                self.event(turn, EventKind::ExplorationCheck(outcome));
                mediator::apply_exploration_verdict(&self.diagram, &judgment.verdict, policy)
            }
        };
        if next != self.diagram {
            let kind = match check {
                CheckKind::Rapport => EventKind::UnmaskExternal {
                    bundle_index: self
                        .diagram
                        .next_masked_bundle()
                        .expect("a bundle was unmasked"),
                },
                CheckKind::Exploration => EventKind::UnmaskInternal,
            };
            self.event(turn, kind);
            self.diagram = next;
        }
    }

    fn therapist_turn(
        &mut self,
        turn: u32,
        system: &[ChatMessage],
        therapist: &dyn ChatBackend,
    ) -> Result<(), BackendError> {
        let messages = with_history(system.to_vec(), &self.transcript);
        let text = backends::complete(
            therapist,
            &messages,
            &self.config.therapist_params,
            Respondent::Therapist,
        )?;
        self.say(turn, Speaker::Therapist, text);
        Ok(())
    }
}

/// Runs one session to completion: therapist first, then the client, then
/// any scheduled rapport and exploration checks, until a termination
/// condition holds.
pub fn run_session(
    profile: &ClientProfile,
    therapist: &dyn ChatBackend,
    client: &dyn ChatBackend,
    judge: &dyn ChatBackend,
    config: &SessionConfig,
) -> Result<SessionRecord, SessionError> {
    config.validate().map_err(SessionError::Config)?;
    let therapist_system = build_therapist_prompt(profile, config)?;
    let mut run = Run {
        profile,
        config,
        diagram: initialize_mask(profile, &config.preset),
        transcript: Vec::new(),
        events: Vec::new(),
        clock: Clock {
            mode: config.clock,
            tick: 0,
        },
    };
    let mut turn = 1;
    loop {
        if let Err(e) = run.therapist_turn(turn, &therapist_system, therapist) {
            return Err(run.abort(turn, e));
        }
        if check_termination(&run.transcript, config) == Some(Termination::Farewell) {
            run.event(turn, EventKind::Termination { reason: Termination::Farewell });
            return Ok(run.record(Termination::Farewell));
        }

        let prompt = build_client_prompt(profile, &run.diagram, config)?;
        let messages = with_history(prompt, &run.transcript);
        match backends::complete(client, &messages, &config.client_params, Respondent::Client) {
            Ok(text) => run.say(turn, Speaker::Client, text),
            Err(e) => return Err(run.abort(turn, e)),
        }

        if mediator::should_check_rapport(turn, &config.mediator) {
            run.check(turn, CheckKind::Rapport, judge);
        }
        if mediator::should_check_exploration(turn, &config.mediator) {
            run.check(turn, CheckKind::Exploration, judge);
        }

        if let Some(mut reason) = check_termination(&run.transcript, config) {
            let mut at = turn;
            if reason == Termination::MaxTurns && config.allow_farewell_past_cap {
                at = turn + 1;
                if let Err(e) = run.therapist_turn(at, &therapist_system, therapist) {
                    return Err(run.abort(at, e));
                }
                if check_termination(&run.transcript, config) == Some(Termination::Farewell) {
                    reason = Termination::Farewell;
                }
            }
            run.event(at, EventKind::Termination { reason });
            return Ok(run.record(reason));
        }
        turn += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedChat;
    use crate::fixtures;
    use crate::persona::{DifficultyPreset, MASK_TOKEN};

    fn config(preset: DifficultyPreset) -> SessionConfig {
        let mut c = SessionConfig::new(preset);
        c.clock = ClockMode::Logical;
        c
    }

    fn run_fixture(f: &fixtures::ScriptedFixture) -> (SessionRecord, ScriptedChat) {
        let therapist = ScriptedChat::new(f.therapist.clone());
        let client = ScriptedChat::new(f.client.clone());
        let judge = ScriptedChat::new(f.judge.clone());
        let record = run_session(&fixtures::alex(), &therapist, &client, &judge, &config(f.preset)).unwrap();
        assert_eq!(judge.remaining(), 0, "{} left judge lines", f.name);
        (record, therapist)
    }

    #[test]
    fn easy_pass_opens_internal_on_turn_one() {
        let (record, _) = run_fixture(&fixtures::easy_pass());
        assert_eq!(record.termination, Termination::Farewell);
        assert_eq!(record.events[0].kind.name(), "exploration_check");
        assert_eq!(record.events[1], SessionEvent { turn: 1, kind: EventKind::UnmaskInternal });
        assert!(record.final_diagram.exposure_status().full_revealed);
        assert_eq!(record.transcript.len(), 9);
        assert_eq!(record.transcript.last().unwrap().turn, 5);
    }

    #[test]
    fn stonewall_runs_to_cap() {
        let (record, _) = run_fixture(&fixtures::hard_stonewall());
        assert_eq!(record.termination, Termination::MaxTurns);
        assert_eq!(record.transcript.len(), 30);
        assert!(!record.events.iter().any(|e| e.kind.name().starts_with("unmask")));
        assert!(!record.final_diagram.exposure_status().full_revealed);
    }

    #[test]
    fn empty_therapist_script_aborts_at_turn_one() {
        let empty = ScriptedChat::new(Vec::<String>::new());
        let client = ScriptedChat::new(["hi"]);
        let judge = ScriptedChat::new(["Rating: 3"]);
        let err = run_session(&fixtures::alex(), &empty, &client, &judge, &config(DifficultyPreset::easy()))
            .unwrap_err();
        match err {
            SessionError::Aborted { turn, partial, .. } => {
                assert_eq!(turn, 1);
                assert_eq!(partial.termination, Termination::Aborted);
                assert!(partial.transcript.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn judge_failure_is_skipped_not_fatal() {
        let therapist = ScriptedChat::new(["How are you?", "Goodbye."]);
        let client = ScriptedChat::new(["Fine."]);
        let judge = ScriptedChat::new(["no rating", "still none"]);
        let record = run_session(&fixtures::alex(), &therapist, &client, &judge, &config(DifficultyPreset::easy()))
            .unwrap();
        assert!(matches!(
            &record.events[0].kind,
            EventKind::CheckSkipped { check: CheckKind::Exploration, .. }
        ));
        assert_eq!(record.termination, Termination::Farewell);
    }

    #[test]
    fn termination_rules() {
        let c = config(DifficultyPreset::easy());
        let t = |turn, text: &str| Utterance::logical(turn, Speaker::Therapist, text, 0);
        let cl = |turn, text: &str| Utterance::logical(turn, Speaker::Client, text, 0);
        assert_eq!(
            check_termination(&[t(1, "Goodbye, Alex… take care.")], &c),
            Some(Termination::Farewell)
        );
        assert_eq!(check_termination(&[t(1, "Good-bye!")], &c), Some(Termination::Farewell));
        let ordinary: Vec<_> = (1..=3).flat_map(|i| [t(i, "And then?"), cl(i, "Not much.")]).collect();
        assert_eq!(check_termination(&ordinary, &c), None);
        let full: Vec<_> = (1..=15).flat_map(|i| [t(i, "And then?"), cl(i, "Not much.")]).collect();
        assert_eq!(check_termination(&full, &c), Some(Termination::MaxTurns));
        let done = vec![t(1, "How can I help?"), cl(1, "I think that's all for today. [session_end]")];
        assert_eq!(check_termination(&done, &c), Some(Termination::ClientDone));
    }

    #[test]
    fn client_done_ends_session() {
        let therapist = ScriptedChat::new(["How are you?", "And then?"]);
        let client = ScriptedChat::new(["Okay.", "I'd like to stop here. [SESSION_END]"]);
        let judge = ScriptedChat::new((0..2).map(|_| "Rating: 3"));
        let record = run_session(&fixtures::alex(), &therapist, &client, &judge, &config(DifficultyPreset::easy()))
            .unwrap();
        assert_eq!(record.termination, Termination::ClientDone);
        assert_eq!(record.completed_turns(), 2);
    }

    #[test]
    fn farewell_past_cap_adds_one_therapist_line() {
        let mut c = config(DifficultyPreset::hard());
        c.max_turns = 2;
        c.allow_farewell_past_cap = true;
        let therapist = ScriptedChat::new(["One?", "Two?", "Goodbye for today."]);
        let client = ScriptedChat::new(["1", "2"]);
        let judge = ScriptedChat::new(Vec::<String>::new());
        let record = run_session(&fixtures::alex(), &therapist, &client, &judge, &c).unwrap();
        assert_eq!(record.transcript.len(), 5);
        assert_eq!(record.termination, Termination::Farewell);
        assert_eq!(record.events.last().unwrap().turn, 3);
    }

    #[test]
    fn client_prompt_tracks_mask_state() {
        let profile = fixtures::alex();
        let c = config(DifficultyPreset::hard());
        let hard = initialize_mask(&profile, &c.preset);
        let text = &build_client_prompt(&profile, &hard, &c).unwrap()[0].content;
        let blocks = |s: &str| s.matches("Situation: unknown\nReactions: unknown").count();
        assert_eq!(blocks(text), 2);
        let more = hard.unmask_next_external();
        let text2 = &build_client_prompt(&profile, &more, &c).unwrap()[0].content;
        assert_eq!(blocks(text2), 1);
        assert!(text.contains("If openness is high"));
        assert!(text.contains("You are now Alex."));
        assert!(text.contains(SessionConfig::DEFAULT_CLOSING_MARKER));
        assert!(!text.contains("{client_name}"));
        assert_eq!(build_client_prompt(&profile, &hard, &c).unwrap()[0].content, *text);
    }

    #[test]
    fn therapist_prompt_is_intake_only() {
        let profile = fixtures::alex();
        let c = config(DifficultyPreset::easy());
        let text = &build_therapist_prompt(&profile, &c).unwrap()[0].content;
        assert!(text.contains("Name: Alex"));
        assert!(text.contains(&profile.intake.reason));
        for e in profile.diagram.elements() {
            assert!(!text.contains(&e.text));
        }
        assert!(!text.contains(MASK_TOKEN));
        let maya = fixtures::maya();
        let text = &build_therapist_prompt(&maya, &c).unwrap()[0].content;
        assert!(!text.contains("Job:"));
        assert!(text.contains("Age: 27"));
        assert!(!text.contains("{intake_form}"));
    }

    #[test]
    fn therapist_requests_never_leak_masked_text() {
        for f in [fixtures::easy_pass(), fixtures::hard_stonewall()] {
            let (record, therapist) = run_fixture(&f);
            let initial = initialize_mask(&record.profile, &record.config.preset);
            for (i, req) in therapist.requests().iter().enumerate() {
                let turn = i as u32 + 1;
                let before: Vec<_> = record.events.iter().filter(|e| e.turn < turn).cloned().collect();
                let diagram = fold_events(&initial, &before);
                assert!(masked_leaks(&req.messages, &diagram).is_empty());
            }
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let (a, _) = run_fixture(&fixtures::easy_pass());
        let (b, _) = run_fixture(&fixtures::easy_pass());
        assert_eq!(a, b);
        let initial = initialize_mask(&a.profile, &a.config.preset);
        assert_eq!(fold_events(&initial, &a.events), a.final_diagram);
    }
}
