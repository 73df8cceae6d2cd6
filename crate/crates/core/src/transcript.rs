//! JSONL transcript files.
//!
//! One object per line: a `header`, then `utterance` and `event` lines in
//! turn order, then a `footer`. The final diagram is not stored; it is
//! rebuilt on load by folding the unmask events over the initial mask and
//! checked against the footer.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::persona::{initialize_mask, ClientProfile, ExposureStatus};
use crate::session::{fold_events, EventKind, SessionConfig, SessionEvent, SessionRecord, Speaker, Termination, Utterance};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("transcript is inconsistent: {}", .0.join("; "))]
    Inconsistent(Vec<String>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    Header {
        format_version: u32,
        profile_ref: String,
        profile: ClientProfile,
        config: SessionConfig,
    },
    Utterance {
        turn: u32,
        speaker: Speaker,
        text: String,
        timestamp: DateTime<Utc>,
    },
    Event {
        turn: u32,
        event: EventKind,
    },
    Footer {
        termination: Termination,
        exposure: ExposureStatus,
        unmasked_bundles: Vec<u8>,
    },
}

fn footer_for(record: &SessionRecord) -> Line {
    Line::Footer {
        termination: record.termination,
        exposure: record.final_diagram.exposure_status(),
        unmasked_bundles: record
            .final_diagram
            .external
            .iter()
            .filter(|b| b.is_unmasked())
            .map(|b| b.index)
            .collect(),
    }
}

/// Serializes a record. Events of turn `t` follow that turn's utterances.
pub fn render_record(record: &SessionRecord) -> String {
    let mut lines = vec![Line::Header {
        format_version: FORMAT_VERSION,
        profile_ref: record.profile_ref.clone(),
        profile: record.profile.clone(),
        config: record.config.clone(),
    }];
    let mut events = record.events.iter().peekable();
    for (i, u) in record.transcript.iter().enumerate() {
        lines.push(Line::Utterance {
            turn: u.turn,
            speaker: u.speaker,
            text: u.text.clone(),
            timestamp: u.timestamp,
        });
        let turn_ends = record.transcript.get(i + 1).is_none_or(|next| next.turn != u.turn);
        while let Some(e) = events.next_if(|e| turn_ends && e.turn <= u.turn) {
            lines.push(Line::Event {
                turn: e.turn,
                event: e.kind.clone(),
            });
        }
    }
    for e in events {
        lines.push(Line::Event {
            turn: e.turn,
            event: e.kind.clone(),
        });
    }
    lines.push(footer_for(record));
    let mut out = String::new();
    for line in &lines {
        out.push_str(&serde_json::to_string(line).expect("transcript lines serialize"));
        out.push('\n');
    }
    out
}

pub fn persist_record(record: &SessionRecord, path: &Path) -> Result<(), TranscriptError> {
    let io = |e: std::io::Error| TranscriptError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, render_record(record)).map_err(io)
}

/// A parsed transcript plus every consistency problem found in it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTranscript {
    pub record: SessionRecord,
    pub violations: Vec<String>,
}

impl ParsedTranscript {
    pub fn is_consistent(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Parses a transcript without rejecting inconsistent event logs.
pub fn parse_transcript(text: &str) -> Result<ParsedTranscript, TranscriptError> {
    let fmt_err = |line: usize, message: String| TranscriptError::Format { line, message };
    if text.trim().is_empty() {
        return Err(fmt_err(1, "empty transcript".into()));
    }
    let mut header = None;
    let mut footer = None;
    let mut transcript = Vec::new();
    let mut events = Vec::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        if raw.trim().is_empty() {
            return Err(fmt_err(n, "blank line".into()));
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| fmt_err(n, e.to_string()))?;
        if footer.is_some() {
            return Err(fmt_err(n, "content after footer".into()));
        }
        match line {
            Line::Header { format_version, profile_ref, profile, config } => {
                if n != 1 {
                    return Err(fmt_err(n, "header must be the first line".into()));
                }
                if format_version != FORMAT_VERSION {
                    return Err(fmt_err(n, format!("unsupported format version {format_version}")));
                }
                header = Some((profile_ref, profile, config));
            }
            _ if header.is_none() => return Err(fmt_err(n, "missing header".into())),
            Line::Utterance { turn, speaker, text, timestamp } => {
                transcript.push(Utterance { turn, speaker, text, timestamp })
            }
            Line::Event { turn, event } => events.push(SessionEvent { turn, kind: event }),
            Line::Footer { termination, exposure, unmasked_bundles } => {
                footer = Some((termination, exposure, unmasked_bundles))
            }
        }
    }
    let (profile_ref, profile, config) = header.expect("checked above");
    let (termination, exposure, unmasked_bundles) =
        footer.ok_or_else(|| fmt_err(last_line + 1, "missing footer (truncated file?)".into()))?;

    let initial = initialize_mask(&profile, &config.preset);
    let final_diagram = fold_events(&initial, &events);
    let record = SessionRecord {
        profile_ref,
        profile,
        config,
        transcript,
        events,
        final_diagram,
        termination,
    };

    let mut violations = check_events(&record);
    if record.final_diagram.exposure_status() != exposure {
        violations.push(format!(
            "folded events give exposure {:?}, footer says {:?}",
            record.final_diagram.exposure_status(),
            exposure
        ));
    }
    if let Line::Footer { unmasked_bundles: folded, .. } = footer_for(&record) {
        if folded != unmasked_bundles {
            violations.push(format!(
                "folded events unmask bundles {folded:?}, footer says {unmasked_bundles:?}"
            ));
        }
    }
    Ok(ParsedTranscript { record, violations })
}

/// Every unmask event must follow a passing check of the matching kind at
/// the same turn, and must change the diagram.
fn check_events(record: &SessionRecord) -> Vec<String> {
    let mut violations = Vec::new();
    let mut diagram = initialize_mask(&record.profile, &record.config.preset);
    for (i, e) in record.events.iter().enumerate() {
        let earlier = &record.events[..i];
        let passed = |want_rapport: bool| {
            earlier.iter().rev().take_while(|p| p.turn == e.turn).any(|p| match &p.kind {
                EventKind::RapportCheck(c) => want_rapport && c.passed,
                EventKind::ExplorationCheck(c) => !want_rapport && c.passed,
                _ => false,
            })
        };
        match e.kind {
            EventKind::UnmaskExternal { bundle_index } => {
                if !passed(true) {
                    violations.push(format!(
                        "turn {}: unmask_external without a passing rapport check",
                        e.turn
                    ));
                }
                if diagram.next_masked_bundle() != Some(bundle_index) {
                    violations.push(format!(
                        "turn {}: unmask_external of bundle {bundle_index} out of order",
                        e.turn
                    ));
                }
                diagram = diagram.unmask_bundle(bundle_index);
            }
            EventKind::UnmaskInternal => {
                if !passed(false) {
                    violations.push(format!(
                        "turn {}: unmask_internal without a passing exploration check",
                        e.turn
                    ));
                }
                if !diagram.internal_masked() {
                    violations.push(format!("turn {}: internal diagram unmasked twice", e.turn));
                }
                diagram = diagram.unmask_internal();
            }
            _ => {}
        }
    }
    violations
}

pub fn load_record(path: &Path) -> Result<SessionRecord, TranscriptError> {
    let parsed = read_transcript(path)?;
    if parsed.violations.is_empty() {
        Ok(parsed.record)
    } else {
        Err(TranscriptError::Inconsistent(parsed.violations))
    }
}

pub fn read_transcript(path: &Path) -> Result<ParsedTranscript, TranscriptError> {
    let text = std::fs::read_to_string(path).map_err(|e| TranscriptError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_transcript(&text)
}

/// Utterances interleaved with checks and unmask events, then the
/// consistency verdict.
pub fn replay_dump(parsed: &ParsedTranscript) -> String {
    let r = &parsed.record;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Session {} (preset {}, max {} turns, termination {})",
        r.profile_ref, r.config.preset.label, r.config.max_turns, r.termination
    );
    let mut events = r.events.iter().peekable();
    for (i, u) in r.transcript.iter().enumerate() {
        let _ = writeln!(out, "[turn {}] {}: {}", u.turn, u.speaker, u.text);
        let turn_ends = r.transcript.get(i + 1).is_none_or(|n| n.turn != u.turn);
        while let Some(e) = events.next_if(|e| turn_ends && e.turn <= u.turn) {
            let _ = writeln!(out, "{}", describe_event(e));
        }
    }
    for e in events {
        let _ = writeln!(out, "{}", describe_event(e));
    }
    let s = r.final_diagram.exposure_status();
    let _ = writeln!(
        out,
        "Final exposure: external={} internal={} full={}",
        s.external_revealed, s.internal_revealed, s.full_revealed
    );
    if parsed.violations.is_empty() {
        let _ = writeln!(out, "Consistency: ok");
    } else {
        for v in &parsed.violations {
            let _ = writeln!(out, "VIOLATION: {v}");
        }
    }
    out
}

fn describe_event(e: &SessionEvent) -> String {
    let body = match &e.kind {
        EventKind::RapportCheck(c) | EventKind::ExplorationCheck(c) => format!(
            "{} score={} {}",
            e.kind.name(),
            c.score,
            if c.passed { "passed" } else { "not passed" }
        ),
        EventKind::UnmaskExternal { bundle_index } => format!("unmask_external bundle={bundle_index}"),
        EventKind::UnmaskInternal => "unmask_internal".into(),
        EventKind::CheckSkipped { check, reason } => format!("check_skipped {check}: {reason}"),
        EventKind::Termination { reason } => format!("termination {reason}"),
    };
    format!("[turn {}] * {body}", e.turn)
}
