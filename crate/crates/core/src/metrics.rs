//! CDER, diagram extraction, semantic matching and IDSS.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{self, BackendError, ChatBackend, ChatMessage, EmbeddingBackend, GenerationParams, Respondent};
use crate::persona::{CognitiveDiagram, ElementKind, ExposureStatus};
use crate::prompts::{PromptTemplate, TemplateError};
use crate::session::SessionRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("extraction failed: {0}")]
    Extraction(String),
    #[error("embedding failed: {0}")]
    Embedding(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// A percentage held as an exact count of hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent {
    hundredths: u32,
}

impl Percent {
    /// `100 * count / total`, rounded half-up to two decimals in integer
    /// arithmetic.
    pub fn ratio(count: u64, total: u64) -> Percent {
        assert!(total > 0 && count <= total, "ratio {count}/{total}");
        let num = u128::from(count) * 10_000 * 2 + u128::from(total);
        let den = u128::from(total) * 2;
        Percent {
            hundredths: (num / den) as u32,
        }
    }

    pub fn from_hundredths(hundredths: u32) -> Percent {
        Percent { hundredths }
    }

    pub fn hundredths(self) -> u32 {
        self.hundredths
    }

    pub fn value(self) -> f64 {
        f64::from(self.hundredths) / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(&format!("{}.{:02}", self.hundredths / 100, self.hundredths % 100))
    }
}

impl Serialize for Percent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !(0.0..=100.0).contains(&v) {
            return Err(serde::de::Error::custom(format!("percentage {v} outside [0, 100]")));
        }
        Ok(Percent {
            hundredths: (v * 100.0).round() as u32,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    External,
    Internal,
    Full,
}

impl Scope {
    pub fn holds(self, status: &ExposureStatus) -> bool {
        match self {
            Scope::External => status.external_revealed,
            Scope::Internal => status.internal_revealed,
            Scope::Full => status.full_revealed,
        }
    }
}

pub fn cder_from_flags(flags: &[ExposureStatus], scope: Scope) -> Result<Percent, MetricsError> {
    if flags.is_empty() {
        return Err(MetricsError::Input("CDER of an empty batch".into()));
    }
    let count = flags.iter().filter(|s| scope.holds(s)).count();
    Ok(Percent::ratio(count as u64, flags.len() as u64))
}

pub fn compute_cder(records: &[SessionRecord], scope: Scope) -> Result<Percent, MetricsError> {
    let flags: Vec<_> = records
        .iter()
        .map(|r| r.final_diagram.exposure_status())
        .collect();
    cder_from_flags(&flags, scope)
}

/// What the extractor found for each internal kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedDiagram {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core_belief: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_belief: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coping_strategy: Option<String>,
}

impl ExtractedDiagram {
    pub fn get(&self, kind: ElementKind) -> Option<&str> {
        match kind {
            ElementKind::RelevantHistory => self.relevant_history.as_deref(),
            ElementKind::CoreBelief => self.core_belief.as_deref(),
            ElementKind::IntermediateBelief => self.intermediate_belief.as_deref(),
            ElementKind::CopingStrategy => self.coping_strategy.as_deref(),
            _ => None,
        }
    }

    fn slot(&mut self, kind: ElementKind) -> Option<&mut Option<String>> {
        match kind {
            ElementKind::RelevantHistory => Some(&mut self.relevant_history),
            ElementKind::CoreBelief => Some(&mut self.core_belief),
            ElementKind::IntermediateBelief => Some(&mut self.intermediate_belief),
            ElementKind::CopingStrategy => Some(&mut self.coping_strategy),
            _ => None,
        }
    }
}

/// Parses the extractor's JSON answer. Blank, null or missing fields are
/// absent; a fenced or prefixed answer is accepted if it holds one object.
pub fn parse_extraction(raw: &str) -> Result<ExtractedDiagram, MetricsError> {
    let start = raw.find('{');
    let end = raw.rfind('}');
    let body = match (start, end) {
        (Some(s), Some(e)) if s < e => &raw[s..=e],
        _ => return Err(MetricsError::Extraction(format!("no JSON object in {raw:?}"))),
    };
    let value: Value = serde_json::from_str(body)
        .map_err(|e| MetricsError::Extraction(format!("invalid JSON ({e}) in {raw:?}")))?;
    let object = value
        .as_object()
        .ok_or_else(|| MetricsError::Extraction("answer is not an object".into()))?;
    let mut out = ExtractedDiagram::default();
    for kind in ElementKind::INTERNAL {
        let text = match object.get(kind.tag()) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.trim().to_string()).filter(|s| !s.is_empty()),
            Some(other) => {
                return Err(MetricsError::Extraction(format!(
                    "field {} is not a string: {other}",
                    kind.tag()
                )))
            }
        };
        *out.slot(kind).expect("internal kind") = text;
    }
    Ok(out)
}

/// One structured extractor call over the client's utterances only.
pub fn extract_diagram(
    record: &SessionRecord,
    extractor: &dyn ChatBackend,
    prompt: &PromptTemplate,
    params: &GenerationParams,
) -> Result<ExtractedDiagram, MetricsError> {
    let utterances: Vec<String> = record
        .client_utterances()
        .map(|u| format!("- {}", u.text))
        .collect();
    if utterances.is_empty() {
        return Err(MetricsError::Input("no client utterances to extract from".into()));
    }
    let text = prompt.render_pairs(&[("client_utterances", &utterances.join("\n"))])?;
    let raw = backends::complete(extractor, &[ChatMessage::system(text)], params, Respondent::Judge)
        .map_err(|e| MetricsError::Extraction(e.to_string()))?;
    parse_extraction(&raw)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, MetricsError> {
    if u.len() != v.len() {
        return Err(MetricsError::Input(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricsError::Input("cosine of a zero vector".into()));
    }
    if !(nu.is_finite() && nv.is_finite() && dot.is_finite()) {
        return Err(MetricsError::Input("non-finite vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub kind: ElementKind,
    pub cosine: f64,
    pub matched: bool,
    pub threshold: f64,
}

/// Best cosine between `predicted` and any of `truths`.
pub fn semantic_match(
    kind: ElementKind,
    truths: &[&str],
    predicted: &str,
    embedder: &dyn EmbeddingBackend,
    threshold: f64,
) -> Result<MatchOutcome, MetricsError> {
    if truths.is_empty() {
        return Err(MetricsError::Input(format!("no ground truth for {kind}")));
    }
    let p = backends::embed(embedder, predicted)?;
    let mut best = f64::NEG_INFINITY;
    for truth in truths {
        let t = backends::embed(embedder, truth)?;
        best = best.max(cosine(&t, &p)?);
    }
    Ok(MatchOutcome {
        kind,
        cosine: best,
        matched: best >= threshold,
        threshold,
    })
}

/// Cosine a prediction must reach to count as a match.
pub const DEFAULT_IDSS_THRESHOLD: f64 = 0.85;

/// Per-session IDSS input: either an extraction or the reason there is none.
pub type ExtractionResult = Result<ExtractedDiagram, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdssSession {
    pub matches: BTreeMap<ElementKind, Option<MatchOutcome>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdssReport {
    pub by_kind: BTreeMap<ElementKind, Percent>,
    pub avg: Percent,
    /// Sessions in the denominator.
    pub scored: usize,
    /// Sessions left out because extraction or embedding failed.
    pub excluded: usize,
    /// Mean best cosine over sessions that produced a prediction, per kind.
    pub mean_cosine: BTreeMap<ElementKind, Option<f64>>,
    pub sessions: Vec<IdssSession>,
}

fn score_session(
    truth: &CognitiveDiagram,
    extracted: &ExtractedDiagram,
    embedder: &dyn EmbeddingBackend,
    threshold: f64,
) -> Result<BTreeMap<ElementKind, Option<MatchOutcome>>, MetricsError> {
    let mut out = BTreeMap::new();
    for kind in ElementKind::INTERNAL {
        let outcome = match extracted.get(kind) {
            Some(predicted) => {
                let truths: Vec<&str> = truth.internal_elements(kind).map(|e| e.text.as_str()).collect();
                Some(semantic_match(kind, &truths, predicted, embedder, threshold)?)
            }
            None => None,
        };
        out.insert(kind, outcome);
    }
    Ok(out)
}

/// Thresholded match rate per internal kind. `truths[i]` is the unmasked
/// ground-truth diagram of the session that produced `extractions[i]`.
pub fn compute_idss(
    extractions: &[ExtractionResult],
    truths: &[&CognitiveDiagram],
    embedder: &dyn EmbeddingBackend,
    threshold: f64,
) -> Result<IdssReport, MetricsError> {
    if extractions.is_empty() {
        return Err(MetricsError::Input("IDSS of an empty batch".into()));
    }
    if extractions.len() != truths.len() {
        return Err(MetricsError::Input(format!(
            "{} extractions for {} ground truths",
            extractions.len(),
            truths.len()
        )));
    }
    let mut sessions = Vec::with_capacity(extractions.len());
    for (extraction, truth) in extractions.iter().zip(truths) {
        let scored = extraction
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|e| score_session(truth, e, embedder, threshold));
        sessions.push(match scored {
            Ok(matches) => IdssSession { matches, excluded: None },
            Err(e) => IdssSession {
                matches: BTreeMap::new(),
                excluded: Some(e.to_string()),
            },
        });
    }
    let scored: Vec<&IdssSession> = sessions.iter().filter(|s| s.excluded.is_none()).collect();
    let n = scored.len() as u64;
    if n == 0 {
        return Err(MetricsError::Input("every session was excluded from IDSS".into()));
    }
    let mut by_kind = BTreeMap::new();
    let mut mean_cosine = BTreeMap::new();
    let mut total_matches = 0u64;
    for kind in ElementKind::INTERNAL {
        let outcomes: Vec<&MatchOutcome> = scored
            .iter()
            .filter_map(|s| s.matches.get(&kind).and_then(Option::as_ref))
            .collect();
        let matched = outcomes.iter().filter(|m| m.matched).count() as u64;
        total_matches += matched;
        by_kind.insert(kind, Percent::ratio(matched, n));
        let mean = (!outcomes.is_empty())
            .then(|| outcomes.iter().map(|m| m.cosine).sum::<f64>() / outcomes.len() as f64);
        mean_cosine.insert(kind, mean);
    }
    Ok(IdssReport {
        by_kind,
        avg: Percent::ratio(total_matches, 4 * n),
        scored: scored.len(),
        excluded: sessions.len() - scored.len(),
        mean_cosine,
        sessions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub transcript: String,
    pub persona: String,
    pub termination: crate::session::Termination,
    pub turns: u32,
    pub exposure: ExposureStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted: Option<ExtractedDiagram>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idss: Option<IdssSession>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub therapist: String,
    pub preset: String,
    pub session_count: usize,
    pub aborted: usize,
    pub cder_external: Percent,
    pub cder_internal: Percent,
    pub cder_full: Percent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idss: Option<IdssReport>,
    pub sessions: Vec<SessionRow>,
}

impl MetricsReport {
    pub const TABLE1_HEADER: &'static str = "therapist,preset,E,I,G";
    pub const TABLE2_HEADER: &'static str = "Avg.,RH,CB,IB,CS";

    /// `E I G` row, two decimals each.
    pub fn cder_row(&self) -> [Percent; 3] {
        [self.cder_external, self.cder_internal, self.cder_full]
    }

    /// `Avg. RH CB IB CS` row, if IDSS was computed.
    pub fn idss_row(&self) -> Option<[Percent; 5]> {
        let idss = self.idss.as_ref()?;
        let k = |kind| idss.by_kind[&kind];
        Some([
            idss.avg,
            k(ElementKind::RelevantHistory),
            k(ElementKind::CoreBelief),
            k(ElementKind::IntermediateBelief),
            k(ElementKind::CopingStrategy),
        ])
    }
}
