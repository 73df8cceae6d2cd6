//! Strategy annotation and distributions, CTRS scoring and judge
//! calibration.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, ChatBackend, ChatMessage, GenerationParams, Respondent};
use crate::mediator::{self, format_dialogue, MediatorPolicy};
use crate::metrics::cosine;
use crate::prompts::{PromptSet, PromptTemplate, TemplateError};
use crate::session::{SessionRecord, Speaker, Utterance};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyCategory {
    Questions,
    Reflections,
    Solutions,
    Others,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyLabel {
    QuestionsOnExperiences,
    QuestionsOnPerspectives,
    QuestionsOnEmotions,
    ReflectionsOnNeeds,
    ReflectionsOnEmotions,
    ReflectionsOnValues,
    ReflectionsOnConsequences,
    ReflectionsOnConflicts,
    ReflectionsOnStrengths,
    SolutionsProblemSolving,
    SolutionsPlanning,
    Normalizing,
    Psychoeducation,
}

impl StrategyLabel {
    pub const ALL: [StrategyLabel; 13] = [
        StrategyLabel::QuestionsOnExperiences,
        StrategyLabel::QuestionsOnPerspectives,
        StrategyLabel::QuestionsOnEmotions,
        StrategyLabel::ReflectionsOnNeeds,
        StrategyLabel::ReflectionsOnEmotions,
        StrategyLabel::ReflectionsOnValues,
        StrategyLabel::ReflectionsOnConsequences,
        StrategyLabel::ReflectionsOnConflicts,
        StrategyLabel::ReflectionsOnStrengths,
        StrategyLabel::SolutionsProblemSolving,
        StrategyLabel::SolutionsPlanning,
        StrategyLabel::Normalizing,
        StrategyLabel::Psychoeducation,
    ];

    pub fn category(self) -> StrategyCategory {
        use StrategyLabel::*;
        match self {
            QuestionsOnExperiences | QuestionsOnPerspectives | QuestionsOnEmotions => {
                StrategyCategory::Questions
            }
            ReflectionsOnNeeds | ReflectionsOnEmotions | ReflectionsOnValues
            | ReflectionsOnConsequences | ReflectionsOnConflicts | ReflectionsOnStrengths => {
                StrategyCategory::Reflections
            }
            SolutionsProblemSolving | SolutionsPlanning => StrategyCategory::Solutions,
            Normalizing | Psychoeducation => StrategyCategory::Others,
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|l| *l == self).expect("listed")
    }

    pub fn tag(self) -> &'static str {
        use StrategyLabel::*;
        match self {
            QuestionsOnExperiences => "questions_on_experiences",
            QuestionsOnPerspectives => "questions_on_perspectives",
            QuestionsOnEmotions => "questions_on_emotions",
            ReflectionsOnNeeds => "reflections_on_needs",
            ReflectionsOnEmotions => "reflections_on_emotions",
            ReflectionsOnValues => "reflections_on_values",
            ReflectionsOnConsequences => "reflections_on_consequences",
            ReflectionsOnConflicts => "reflections_on_conflicts",
            ReflectionsOnStrengths => "reflections_on_strengths",
            SolutionsProblemSolving => "solutions_problem_solving",
            SolutionsPlanning => "solutions_planning",
            Normalizing => "normalizing",
            Psychoeducation => "psychoeducation",
        }
    }

    pub fn display_name(self) -> &'static str {
        use StrategyLabel::*;
        match self {
            QuestionsOnExperiences => "Questions on Experiences",
            QuestionsOnPerspectives => "Questions on Perspectives",
            QuestionsOnEmotions => "Questions on Emotions",
            ReflectionsOnNeeds => "Reflections on Needs",
            ReflectionsOnEmotions => "Reflections on Emotions",
            ReflectionsOnValues => "Reflections on Values",
            ReflectionsOnConsequences => "Reflections on Consequences",
            ReflectionsOnConflicts => "Reflections on Conflicts",
            ReflectionsOnStrengths => "Reflections on Strengths",
            SolutionsProblemSolving => "Solutions: Problem-Solving",
            SolutionsPlanning => "Solutions: Planning",
            Normalizing => "Normalizing",
            Psychoeducation => "Psychoeducation",
        }
    }

    pub fn description(self) -> &'static str {
        use StrategyLabel::*;
        match self {
            QuestionsOnExperiences => "Encouraging self-exploration by reflecting on past experiences and their impact.",
            QuestionsOnPerspectives => "Challenging and broadening viewpoints to promote cognitive flexibility.",
            QuestionsOnEmotions => "Deepening emotional insight by exploring feelings and their origins.",
            ReflectionsOnNeeds => "Identifying and articulating one's fundamental psychological and emotional needs.",
            ReflectionsOnEmotions => "Recognizing and processing emotions to enhance self-awareness and regulation.",
            ReflectionsOnValues => "Exploring core values to guide decision-making and behavior.",
            ReflectionsOnConsequences => "Evaluating the potential outcomes of thoughts, emotions, and actions.",
            ReflectionsOnConflicts => "Understanding internal and interpersonal conflicts to resolve them constructively.",
            ReflectionsOnStrengths => "Identifying personal strengths to build self-efficacy and resilience.",
            SolutionsProblemSolving => "Developing effective strategies to address challenges and obstacles.",
            SolutionsPlanning => "Creating structured action plans to implement positive changes.",
            Normalizing => "Reframing experiences as common and understandable to reduce distress.",
            Psychoeducation => "Providing knowledge about psychological concepts to enhance coping and insight.",
        }
    }

    /// Exact match against the closed set after lowercasing and turning
    /// punctuation into spaces. Display names and tags are both accepted.
    pub fn parse(raw: &str) -> Option<StrategyLabel> {
        let key = normalize(raw);
        Self::ALL
            .into_iter()
            .find(|l| normalize(l.display_name()) == key || normalize(l.tag()) == key)
    }
}

impl fmt::Display for StrategyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

fn normalize(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Annotation of one therapist utterance; `Unlabeled` when the annotator's
/// answer is outside the closed set or the call failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    Strategy(StrategyLabel),
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedUtterance {
    pub turn: u32,
    pub annotation: Annotation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn strategy_list() -> String {
    StrategyLabel::ALL
        .iter()
        .map(|l| format!("- {}: {}", l.display_name(), l.description()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One annotator call per therapist utterance, with the dialogue up to
/// that utterance as context.
pub fn annotate_strategies(
    record: &SessionRecord,
    annotator: &dyn ChatBackend,
    prompt: &PromptTemplate,
    params: &GenerationParams,
) -> Result<Vec<AnnotatedUtterance>, AnalysisError> {
    if record.therapist_utterances().next().is_none() {
        return Err(AnalysisError::Input("record has no therapist utterances".into()));
    }
    let list = strategy_list();
    let mut out = Vec::new();
    for (i, u) in record.transcript.iter().enumerate() {
        if u.speaker != Speaker::Therapist {
            continue;
        }
        let context = match format_dialogue(&record.transcript[..i]) {
            s if s.is_empty() => "(start of session)".to_string(),
            s => s,
        };
        let text = prompt.render_pairs(&[
            ("strategy_list", &list),
            ("dialogue_context", &context),
            ("utterance", &u.text),
        ])?;
        let (annotation, error) =
            match backends::complete(annotator, &[ChatMessage::system(text)], params, Respondent::Judge) {
                Ok(answer) => match StrategyLabel::parse(&answer) {
                    Some(label) => (Annotation::Strategy(label), None),
                    None => (Annotation::Unlabeled, Some(format!("not a strategy: {answer:?}"))),
                },
                Err(e) => (Annotation::Unlabeled, Some(e.to_string())),
            };
        out.push(AnnotatedUtterance {
            turn: u.turn,
            annotation,
            error,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDistribution {
    pub counts: BTreeMap<StrategyLabel, u64>,
    pub frequencies: BTreeMap<StrategyLabel, f64>,
    pub total: u64,
    pub unlabeled: u64,
}

impl StrategyDistribution {
    pub fn from_counts(counts: [u64; 13], unlabeled: u64) -> Result<Self, AnalysisError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(AnalysisError::Input("no strategy labels to aggregate".into()));
        }
        let mut c = BTreeMap::new();
        let mut f = BTreeMap::new();
        for (label, n) in StrategyLabel::ALL.into_iter().zip(counts) {
            c.insert(label, n);
            f.insert(label, n as f64 / total as f64);
        }
        Ok(Self {
            counts: c,
            frequencies: f,
            total,
            unlabeled,
        })
    }

    /// Frequencies in the fixed label order; always 13 entries.
    pub fn vector(&self) -> [f64; 13] {
        let mut v = [0.0; 13];
        for (label, f) in &self.frequencies {
            v[label.index()] = *f;
        }
        v
    }

    pub fn top(&self) -> StrategyLabel {
        // First label wins ties, so scaling never changes the answer.
        let mut best = StrategyLabel::ALL[0];
        for label in StrategyLabel::ALL {
            if self.counts[&label] > self.counts[&best] {
                best = label;
            }
        }
        best
    }
}

pub fn strategy_distribution(labeled: &[Vec<AnnotatedUtterance>]) -> Result<StrategyDistribution, AnalysisError> {
    let mut counts = [0u64; 13];
    let mut unlabeled = 0;
    for a in labeled.iter().flatten() {
        match a.annotation {
            Annotation::Strategy(label) => counts[label.index()] += 1,
            Annotation::Unlabeled => unlabeled += 1,
        }
    }
    StrategyDistribution::from_counts(counts, unlabeled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (label, row) in self.labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.4}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Pairwise cosine of the 13-dimensional frequency vectors.
pub fn distribution_similarity(
    dists: &BTreeMap<String, StrategyDistribution>,
) -> Result<SimilarityMatrix, AnalysisError> {
    if dists.len() < 2 {
        return Err(AnalysisError::Input("need at least two distributions".into()));
    }
    let labels: Vec<String> = dists.keys().cloned().collect();
    let vectors: Vec<[f64; 13]> = dists.values().map(StrategyDistribution::vector).collect();
    let n = labels.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = if i == j {
                cosine(&vectors[i], &vectors[i])
                    .map(|_| 1.0)
                    .map_err(|e| AnalysisError::Input(format!("{}: {e}", labels[i])))?
            } else {
                cosine(&vectors[i], &vectors[j])
                    .map_err(|e| AnalysisError::Input(format!("{} vs {}: {e}", labels[i], labels[j])))?
            };
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    Ok(SimilarityMatrix { labels, values })
}

pub fn distributions_csv(dists: &BTreeMap<String, StrategyDistribution>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["group".to_string()];
    header.extend(StrategyLabel::ALL.iter().map(|l| l.tag().to_string()));
    header.push("unlabeled".into());
    w.write_record(&header).expect("in-memory write");
    for (group, d) in dists {
        let mut rec = vec![group.clone()];
        rec.extend(d.vector().iter().map(|f| format!("{f:.4}")));
        rec.push(d.unlabeled.to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtrsCriterion {
    Understanding,
    InterpersonalEffectiveness,
    Collaboration,
    GuidedDiscovery,
    KeyCognitionsOrBehaviors,
    StrategyForChange,
}

impl CtrsCriterion {
    pub const ALL: [CtrsCriterion; 6] = [
        CtrsCriterion::Understanding,
        CtrsCriterion::InterpersonalEffectiveness,
        CtrsCriterion::Collaboration,
        CtrsCriterion::GuidedDiscovery,
        CtrsCriterion::KeyCognitionsOrBehaviors,
        CtrsCriterion::StrategyForChange,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CtrsCriterion::Understanding => "understanding",
            CtrsCriterion::InterpersonalEffectiveness => "interpersonal_effectiveness",
            CtrsCriterion::Collaboration => "collaboration",
            CtrsCriterion::GuidedDiscovery => "guided_discovery",
            CtrsCriterion::KeyCognitionsOrBehaviors => "key_cognitions_or_behaviors",
            CtrsCriterion::StrategyForChange => "strategy_for_change",
        }
    }
}

static CTRS_SCORE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:[*_]*\[?score\]?[*_]*\s*:\s*)?[*_]*(\d+)[*_]*\s*(,|$)").expect("static regex")
});
static CTRS_LABELLED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^\s*[*_]*\[?score\]?[*_]*\s*:\s*[*_]*(\d+)[*_]*\s*(?:,|$)").expect("static regex")
});

/// Integer before the first comma, optionally after a `[Score]:` label.
pub fn parse_ctrs_score(raw: &str) -> Result<u8, String> {
    let caps = CTRS_SCORE
        .captures(raw.trim_start())
        .or_else(|| CTRS_LABELLED.captures(raw))
        .ok_or_else(|| format!("no score before a comma in {raw:?}"))?;
    let value: u32 = caps[1]
        .parse()
        .map_err(|_| format!("score out of range in {raw:?}"))?;
    if value > 6 {
        return Err(format!("score {value} outside 0..=6"));
    }
    Ok(value as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrsReport {
    pub scores: BTreeMap<CtrsCriterion, u8>,
    pub failed: BTreeMap<CtrsCriterion, String>,
    /// `100 * sum / (6 * scored criteria)`; `None` if every criterion failed.
    pub normalized: Option<f64>,
    pub partial: bool,
}

impl CtrsReport {
    pub fn from_scores(scores: BTreeMap<CtrsCriterion, u8>, failed: BTreeMap<CtrsCriterion, String>) -> Self {
        let sum: u32 = scores.values().map(|s| u32::from(*s)).sum();
        let normalized = (!scores.is_empty()).then(|| 100.0 * f64::from(sum) / (6.0 * scores.len() as f64));
        Self {
            partial: !failed.is_empty(),
            scores,
            failed,
            normalized,
        }
    }
}

pub fn score_ctrs(
    record: &SessionRecord,
    judge: &dyn ChatBackend,
    prompts: &PromptSet,
    params: &GenerationParams,
) -> Result<CtrsReport, AnalysisError> {
    let conversation = format_dialogue(&record.transcript);
    let mut scores = BTreeMap::new();
    let mut failed = BTreeMap::new();
    for criterion in CtrsCriterion::ALL {
        let template = prompts
            .ctrs_prompt(criterion.tag())
            .ok_or_else(|| AnalysisError::Input(format!("no prompt for {}", criterion.tag())))?;
        let text = template.render_pairs(&[("conversation", &conversation)])?;
        let outcome = backends::complete(judge, &[ChatMessage::system(text)], params, Respondent::Judge)
            .map_err(|e| e.to_string())
            .and_then(|raw| parse_ctrs_score(&raw));
        match outcome {
            Ok(s) => {
                scores.insert(criterion, s);
            }
            Err(e) => {
                failed.insert(criterion, e);
            }
        }
    }
    Ok(CtrsReport::from_scores(scores, failed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityLabel {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCalibration {
    pub transcripts: usize,
    pub excluded: Vec<String>,
    pub script_eval_mean: f64,
    pub utterance_eval_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub high: GroupCalibration,
    pub low: GroupCalibration,
    /// High-quality sessions outscore low-quality ones under both judges.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTranscript {
    pub name: String,
    pub dialogue: Vec<Utterance>,
    pub label: QualityLabel,
}

/// Script eval: one rapport judgment over the whole transcript. Utterance
/// eval: the mean exploration judgment over each exchange prefix.
fn calibrate_one(
    dialogue: &[Utterance],
    judge: &dyn ChatBackend,
    policy: &MediatorPolicy,
    params: &GenerationParams,
) -> Result<(f64, f64), String> {
    let script = mediator::with_one_retry(|| mediator::judge_rapport(dialogue, judge, policy, params))
        .map_err(|e| e.to_string())?;
    let mut scores = Vec::new();
    for (i, u) in dialogue.iter().enumerate() {
        let exchange_ends = dialogue.get(i + 1).is_none_or(|n| n.turn != u.turn);
        if exchange_ends {
            let prefix = &dialogue[..=i];
            let j = mediator::with_one_retry(|| mediator::judge_exploration(prefix, judge, policy, params))
                .map_err(|e| e.to_string())?;
            scores.push(f64::from(j.verdict.value));
        }
    }
    if scores.is_empty() {
        return Err("empty transcript".into());
    }
    Ok((
        f64::from(script.verdict.value),
        scores.iter().sum::<f64>() / scores.len() as f64,
    ))
}

pub fn judge_calibration(
    transcripts: &[LabeledTranscript],
    judge: &dyn ChatBackend,
    policy: &MediatorPolicy,
    params: &GenerationParams,
) -> Result<CalibrationReport, AnalysisError> {
    let mut groups: BTreeMap<QualityLabel, (Vec<(f64, f64)>, Vec<String>)> = BTreeMap::new();
    for label in [QualityLabel::High, QualityLabel::Low] {
        if !transcripts.iter().any(|t| t.label == label) {
            return Err(AnalysisError::Input(format!("no {label:?} transcripts")));
        }
        groups.insert(label, (Vec::new(), Vec::new()));
    }
    for t in transcripts {
        let entry = groups.get_mut(&t.label).expect("both groups present");
        match calibrate_one(&t.dialogue, judge, policy, params) {
            Ok(scores) => entry.0.push(scores),
            Err(e) => {
                log::warn!("calibration transcript {} excluded: {e}", t.name);
                entry.1.push(format!("{}: {e}", t.name));
            }
        }
    }
    let summarize = |label: QualityLabel| -> Result<GroupCalibration, AnalysisError> {
        let (scores, excluded) = &groups[&label];
        if scores.is_empty() {
            return Err(AnalysisError::Input(format!("every {label:?} transcript was excluded")));
        }
        let n = scores.len() as f64;
        Ok(GroupCalibration {
            transcripts: scores.len(),
            excluded: excluded.clone(),
            script_eval_mean: scores.iter().map(|s| s.0).sum::<f64>() / n,
            utterance_eval_mean: scores.iter().map(|s| s.1).sum::<f64>() / n,
        })
    };
    let high = summarize(QualityLabel::High)?;
    let low = summarize(QualityLabel::Low)?;
    let pass = high.script_eval_mean > low.script_eval_mean && high.utterance_eval_mean > low.utterance_eval_mean;
    Ok(CalibrationReport { high, low, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedChat;
    use crate::fixtures;
    use crate::persona::DifficultyPreset;
    use crate::session::{run_session, ClockMode, SessionConfig};

    fn easy_record() -> SessionRecord {
        let f = fixtures::easy_pass();
        let mut c = SessionConfig::new(f.preset);
        c.clock = ClockMode::Logical;
        run_session(
            &fixtures::alex(),
            &ScriptedChat::new(f.therapist),
            &ScriptedChat::new(f.client),
            &ScriptedChat::new(f.judge),
            &c,
        )
        .unwrap()
    }

    #[test]
    fn categories_partition() {
        let count = |c| StrategyLabel::ALL.iter().filter(|l| l.category() == c).count();
        assert_eq!(count(StrategyCategory::Questions), 3);
        assert_eq!(count(StrategyCategory::Reflections), 6);
        assert_eq!(count(StrategyCategory::Solutions), 2);
        assert_eq!(count(StrategyCategory::Others), 2);
    }

    #[test]
    fn closed_set_parsing() {
        assert_eq!(StrategyLabel::parse("Reflections on Emotions"), Some(StrategyLabel::ReflectionsOnEmotions));
        assert_eq!(StrategyLabel::parse("  reflections on emotions. "), Some(StrategyLabel::ReflectionsOnEmotions));
        assert_eq!(StrategyLabel::parse("Solutions – Problem-Solving"), Some(StrategyLabel::SolutionsProblemSolving));
        assert_eq!(StrategyLabel::parse("normalizing"), Some(StrategyLabel::Normalizing));
        assert_eq!(StrategyLabel::parse("questions_on_emotions"), Some(StrategyLabel::QuestionsOnEmotions));
        assert_eq!(StrategyLabel::parse("Tarot Reading"), None);
        assert_eq!(StrategyLabel::parse("Reflections"), None);
    }

    #[test]
    fn one_annotation_per_therapist_utterance() {
        let record = easy_record();
        let annotator = ScriptedChat::new([
            "Questions on Experiences",
            "Reflections on Emotions",
            "Tarot Reading",
            "Questions on Emotions",
            "Normalizing",
        ]);
        let prompts = PromptSet::default();
        let labels = annotate_strategies(&record, &annotator, &prompts.strategy, &GenerationParams::default()).unwrap();
        assert_eq!(labels.len(), 5);
        assert_eq!(labels[1].annotation, Annotation::Strategy(StrategyLabel::ReflectionsOnEmotions));
        assert_eq!(labels[2].annotation, Annotation::Unlabeled);
        assert_eq!(labels[4].turn, 5);
        let sent = &annotator.requests()[1].messages[0].content;
        assert!(sent.contains("Psychoeducation"));
        assert!(sent.contains(&record.transcript[2].text));
    }

    #[test]
    fn distribution_frequencies() {
        let a = |l| AnnotatedUtterance { turn: 1, annotation: Annotation::Strategy(l), error: None };
        let d = strategy_distribution(&[vec![
            a(StrategyLabel::QuestionsOnEmotions),
            a(StrategyLabel::QuestionsOnEmotions),
            a(StrategyLabel::Normalizing),
            AnnotatedUtterance { turn: 2, annotation: Annotation::Unlabeled, error: None },
        ]])
        .unwrap();
        assert_eq!(d.frequencies[&StrategyLabel::QuestionsOnEmotions], 2.0 / 3.0);
        assert_eq!(d.frequencies[&StrategyLabel::Normalizing], 1.0 / 3.0);
        assert_eq!(d.unlabeled, 1);
        assert_eq!(d.vector().len(), 13);
        assert_eq!(d.top(), StrategyLabel::QuestionsOnEmotions);
        assert!(strategy_distribution(&[vec![]]).is_err());
    }

    #[test]
    fn similarity_values() {
        let mut counts = [0u64; 13];
        counts[StrategyLabel::QuestionsOnEmotions.index()] = 2;
        counts[StrategyLabel::Normalizing.index()] = 1;
        let mut swapped = [0u64; 13];
        swapped[StrategyLabel::QuestionsOnEmotions.index()] = 1;
        swapped[StrategyLabel::Normalizing.index()] = 2;
        let mut disjoint = [0u64; 13];
        disjoint[StrategyLabel::Psychoeducation.index()] = 4;
        let dists: BTreeMap<String, StrategyDistribution> = [
            ("a", counts),
            ("b", swapped),
            ("c", disjoint),
            ("d", counts.map(|c| c * 3)),
        ]
        .into_iter()
        .map(|(k, c)| (k.to_string(), StrategyDistribution::from_counts(c, 0).unwrap()))
        .collect();
        let m = distribution_similarity(&dists).unwrap();
        // (2*1 + 1*2) / (sqrt(5) * sqrt(5)) = 0.8
        assert!((m.get("a", "b").unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(m.get("a", "c").unwrap(), 0.0);
        assert!((m.get("a", "d").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(m.get("b", "b").unwrap(), 1.0);
        assert!(m.to_csv().starts_with(",a,b,c,d\n"));
        let one: BTreeMap<_, _> = dists.into_iter().take(1).collect();
        assert!(distribution_similarity(&one).is_err());
    }

    #[test]
    fn ctrs_parsing() {
        assert_eq!(parse_ctrs_score("6, the therapist encouraged the patient to take an active role"), Ok(6));
        assert_eq!(parse_ctrs_score("[Score]: 4, solid work"), Ok(4));
        assert_eq!(parse_ctrs_score("[Score]: 5\n[Justification]: warm"), Ok(5));
        assert!(parse_ctrs_score("7, too high").is_err());
        assert!(parse_ctrs_score("excellent, 6").is_err());
        assert!(parse_ctrs_score("").is_err());
    }

    #[test]
    fn ctrs_scoring() {
        let record = easy_record();
        let prompts = PromptSet::default();
        let params = GenerationParams::default();
        let judge = ScriptedChat::new((0..6).map(|_| "6, excellent"));
        let r = score_ctrs(&record, &judge, &prompts, &params).unwrap();
        assert_eq!(r.normalized, Some(100.0));
        assert!(!r.partial);
        let judge = ScriptedChat::new((0..6).map(|_| "5, good"));
        let r = score_ctrs(&record, &judge, &prompts, &params).unwrap();
        // 30 / 36 * 100
        assert!((r.normalized.unwrap() - 83.333_333_333).abs() < 1e-6);
        let judge = ScriptedChat::new(["6, a", "6, b", "6, the therapist encouraged the patient to take an active role", "x", "3, c", "9, d"]);
        let r = score_ctrs(&record, &judge, &prompts, &params).unwrap();
        assert_eq!(r.scores[&CtrsCriterion::Collaboration], 6);
        assert!(r.partial);
        assert_eq!(r.failed.len(), 2);
        assert!((r.normalized.unwrap() - 100.0 * 21.0 / 24.0).abs() < 1e-9);
        let sent = &judge.requests()[2].messages[0].content;
        assert!(sent.contains("collaborative goal-setting"));
    }

    fn labeled(name: &str, label: QualityLabel, turns: u32) -> LabeledTranscript {
        let dialogue = (1..=turns)
            .flat_map(|t| {
                [
                    Utterance::logical(t, Speaker::Therapist, format!("question {t}"), 0),
                    Utterance::logical(t, Speaker::Client, format!("answer {t}"), 1),
                ]
            })
            .collect();
        LabeledTranscript { name: name.into(), dialogue, label }
    }

    #[test]
    fn calibration_groups() {
        let policy = MediatorPolicy::for_preset(&DifficultyPreset::easy());
        let params = GenerationParams::default();
        // Per transcript: one rapport line, then one exploration line per exchange.
        let judge = ScriptedChat::new([
            "Rating: 4", "[Rating]: 4",
            "Rating: 3", "[Rating]: 3",
            "Rating: 2", "[Rating]: 1",
        ]);
        let items = [
            labeled("h1", QualityLabel::High, 1),
            labeled("h2", QualityLabel::High, 1),
            labeled("l1", QualityLabel::Low, 1),
        ];
        let r = judge_calibration(&items, &judge, &policy, &params).unwrap();
        assert_eq!(r.high.script_eval_mean, 3.5);
        assert_eq!(r.low.script_eval_mean, 2.0);
        assert!(r.pass);
        assert!(judge_calibration(&items[..2], &judge, &policy, &params).is_err());
    }
}
