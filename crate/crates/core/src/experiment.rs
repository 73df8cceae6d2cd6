//! Batch experiments: config loading, the parallel runner, reports,
//! persona validation and judge calibration over labeled transcripts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    self, AnnotatedUtterance, CalibrationReport, CtrsReport, LabeledTranscript, QualityLabel,
    StrategyDistribution,
};
use crate::backends::{BackendDescriptor, BackendError, BackendFactory, BackendKind, ChatBackend};
use crate::mediator::MediatorPolicy;
use crate::metrics::{
    self, ExtractionResult, MetricsReport, Percent, Scope, SessionRow,
};
use crate::persona::{
    initialize_mask, load_profile_file, ClientProfile, Difficulty, DifficultyPreset, PersonaError,
    TraitLevel,
};
use crate::prompts::PromptSet;
use crate::session::{
    build_client_prompt, build_therapist_prompt, masked_leaks, run_session, ClockMode,
    SessionConfig, SessionError, SessionRecord, Speaker, Utterance,
};
use crate::transcript::{self, TranscriptError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend pre-flight failed for `{role}`: {source}")]
    Preflight { role: String, source: BackendError },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("i/o error at {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

impl ExperimentError {
    /// 2 for anything wrong before work starts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Preflight { .. } => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Which persona property groups sessions when comparing strategy usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientTypeAxis {
    #[default]
    Preset,
    Openness,
    Metacognition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampMode {
    /// Logical when every backend is scripted or fixed, wall clock otherwise.
    #[default]
    Auto,
    Wall,
    Logical,
}

fn default_sessions() -> u32 {
    1
}
fn default_parallelism() -> usize {
    1
}
fn default_threshold() -> f64 {
    metrics::DEFAULT_IDSS_THRESHOLD
}
fn default_max_turns() -> u32 {
    SessionConfig::DEFAULT_MAX_TURNS
}
fn default_marker() -> String {
    SessionConfig::DEFAULT_CLOSING_MARKER.into()
}
fn default_score_threshold() -> u8 {
    MediatorPolicy::DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub personas_dir: PathBuf,
    pub presets: Vec<Difficulty>,
    #[serde(default = "default_sessions")]
    pub sessions_per_cell: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub output_dir: PathBuf,
    #[serde(default = "default_threshold")]
    pub idss_threshold: f64,
    #[serde(default = "default_max_turns")]
    pub max_turns: u32,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: u8,
    #[serde(default = "default_marker")]
    pub closing_marker: String,
    #[serde(default)]
    pub allow_farewell_past_cap: bool,
    #[serde(default)]
    pub timestamps: TimestampMode,
    #[serde(default)]
    pub client_type_axis: ClientTypeAxis,
    /// Directory of prompt overrides; missing files fall back to defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub therapist: Option<BackendDescriptor>,
    /// Additional therapist backends; each gets its own report rows.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub therapists: Vec<BackendDescriptor>,
    pub client: BackendDescriptor,
    pub judge: BackendDescriptor,
    /// Defaults to the judge backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<BackendDescriptor>,
    /// IDSS is skipped without one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<BackendDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<BackendDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctrs_judge: Option<BackendDescriptor>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Loads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.personas_dir);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.prompts_dir {
            fix(p);
        }
        for d in self.descriptors_mut() {
            if let Some(p) = &mut d.script_file {
                fix(p);
            }
        }
    }

    fn descriptors_mut(&mut self) -> Vec<&mut BackendDescriptor> {
        let mut out: Vec<&mut BackendDescriptor> = self.therapist.iter_mut().collect();
        out.extend(self.therapists.iter_mut());
        out.push(&mut self.client);
        out.push(&mut self.judge);
        for d in [&mut self.extractor, &mut self.embedder, &mut self.annotator, &mut self.ctrs_judge] {
            out.extend(d.iter_mut());
        }
        out
    }

    /// Every backend with the role it plays, in config order.
    pub fn roles(&self) -> Vec<(String, &BackendDescriptor)> {
        let mut out: Vec<(String, &BackendDescriptor)> = self
            .therapist_backends()
            .into_iter()
            .map(|d| (format!("therapist:{}", d.display_label()), d))
            .collect();
        out.push(("client".into(), &self.client));
        out.push(("judge".into(), &self.judge));
        out.push(("extractor".into(), self.extractor_backend()));
        for (role, d) in [
            ("embedder", &self.embedder),
            ("annotator", &self.annotator),
            ("ctrs_judge", &self.ctrs_judge),
        ] {
            if let Some(d) = d {
                out.push((role.into(), d));
            }
        }
        out
    }

    pub fn therapist_backends(&self) -> Vec<&BackendDescriptor> {
        self.therapist.iter().chain(&self.therapists).collect()
    }

    pub fn extractor_backend(&self) -> &BackendDescriptor {
        self.extractor.as_ref().unwrap_or(&self.judge)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.sessions_per_cell == 0 {
            return bad("sessions_per_cell must be at least 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.presets.is_empty() {
            return bad("presets must name at least one difficulty".into());
        }
        if self.max_turns == 0 {
            return bad("max_turns must be at least 1".into());
        }
        if !(1..=5).contains(&self.score_threshold) {
            return bad(format!("score_threshold {} outside 1..=5", self.score_threshold));
        }
        if !(self.idss_threshold.is_finite() && (-1.0..=1.0).contains(&self.idss_threshold)) {
            return bad(format!("idss_threshold {} outside [-1, 1]", self.idss_threshold));
        }
        let therapists = self.therapist_backends();
        if therapists.is_empty() {
            return bad("no therapist backend configured".into());
        }
        let mut labels = BTreeMap::new();
        for t in &therapists {
            let dir = dir_label(&t.display_label());
            if labels.insert(dir.clone(), ()).is_some() {
                return bad(format!("two therapist backends share the label `{dir}`"));
            }
        }
        for (role, d) in self.roles() {
            let wants_chat = role != "embedder";
            if d.is_chat() != wants_chat {
                return bad(format!("`{role}` cannot use a {:?} backend", d.kind));
            }
        }
        Ok(())
    }

    fn offline(&self) -> bool {
        self.roles().iter().all(|(_, d)| {
            matches!(d.kind, BackendKind::ScriptedChat | BackendKind::FixedEmbedding)
        })
    }

    pub fn clock(&self) -> ClockMode {
        match self.timestamps {
            TimestampMode::Wall => ClockMode::Wall,
            TimestampMode::Logical => ClockMode::Logical,
            TimestampMode::Auto if self.offline() => ClockMode::Logical,
            TimestampMode::Auto => ClockMode::Wall,
        }
    }

    pub fn prompt_set(&self) -> Result<PromptSet, ExperimentError> {
        match &self.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir).map_err(|e| ExperimentError::Config(e.to_string())),
            None => Ok(PromptSet::default()),
        }
    }

    pub fn session_config(
        &self,
        preset: Difficulty,
        therapist: &BackendDescriptor,
        prompts: &PromptSet,
        seed: u64,
    ) -> SessionConfig {
        let mut c = SessionConfig::with_prompts(DifficultyPreset::for_label(preset), prompts);
        c.max_turns = self.max_turns;
        c.mediator.score_threshold = self.score_threshold;
        c.therapist_params = therapist.params.clone();
        c.client_params = self.client.params.clone();
        c.judge_params = self.judge.params.clone();
        c.seed = seed;
        c.closing_marker = self.closing_marker.clone();
        c.allow_farewell_past_cap = self.allow_farewell_past_cap;
        c.clock = self.clock();
        c
    }
}

pub fn dir_label(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        "_".into()
    } else {
        s
    }
}

#[derive(Debug)]
pub struct LoadedPersona {
    pub file: String,
    pub profile: ClientProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaFailure {
    pub file: String,
    pub error: String,
}

fn persona_files(dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `field: message` for schema errors, the full message otherwise.
pub fn persona_diagnostic(e: &PersonaError) -> String {
    match e {
        PersonaError::Schema { field, message } | PersonaError::Parse { field, message } => {
            format!("{field}: {message}")
        }
        other => other.to_string(),
    }
}

pub fn load_personas(dir: &Path) -> Result<(Vec<LoadedPersona>, Vec<PersonaFailure>), ExperimentError> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for path in persona_files(dir)? {
        match load_profile_file(&path) {
            Ok(profile) => ok.push(LoadedPersona { file: file_name(&path), profile }),
            Err(e) => failed.push(PersonaFailure {
                file: file_name(&path),
                error: persona_diagnostic(&e),
            }),
        }
    }
    Ok((ok, failed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub file: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.ok)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            match &e.error {
                None => writeln!(out, "PASS {}", e.file),
                Some(err) => writeln!(out, "FAIL {}: {err}", e.file),
            }
            .expect("string write");
        }
        let failed = self.entries.iter().filter(|e| !e.ok).count();
        writeln!(out, "{} files, {failed} failed", self.entries.len()).expect("string write");
        out
    }
}

pub fn validate_personas(dir: &Path) -> Result<ValidationReport, ExperimentError> {
    if !dir.is_dir() {
        return Err(ExperimentError::Input(format!("{} is not a directory", dir.display())));
    }
    let (ok, failed) = load_personas(dir)?;
    let mut entries: Vec<ValidationEntry> = ok
        .into_iter()
        .map(|p| ValidationEntry { file: p.file, ok: true, error: None })
        .chain(failed.into_iter().map(|f| ValidationEntry {
            file: f.file,
            ok: false,
            error: Some(f.error),
        }))
        .collect();
    entries.sort_by(|a, b| a.file.cmp(&b.file));
    Ok(ValidationReport { entries })
}

// ---------------------------------------------------------------------------
// Batch runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub therapist: String,
    pub preset: Difficulty,
    pub sessions: usize,
    pub aborted: Vec<String>,
    pub metrics_written: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub sessions: usize,
    pub aborted: Vec<String>,
    pub persona_failures: Vec<PersonaFailure>,
    pub cells: Vec<CellSummary>,
}

impl BatchSummary {
    pub fn exit_code(&self) -> i32 {
        if self.aborted.is_empty() && self.persona_failures.is_empty() {
            0
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionAnalysis {
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<AnnotatedUtterance>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctrs: Option<CtrsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAnalysis {
    pub therapist: String,
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<StrategyDistribution>,
    /// Mean normalized CTRS over sessions with at least one scored criterion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctrs_mean: Option<f64>,
    pub sessions: Vec<SessionAnalysis>,
}

struct Job<'a> {
    therapist: &'a BackendDescriptor,
    preset: Difficulty,
    persona: &'a LoadedPersona,
    index: u32,
}

struct JobResult {
    therapist: String,
    preset: Difficulty,
    transcript: String,
    record: SessionRecord,
    aborted: bool,
    extraction: Option<ExtractionResult>,
    analysis: SessionAnalysis,
}

fn persona_stem(p: &LoadedPersona) -> String {
    dir_label(p.file.trim_end_matches(".json"))
}

fn transcript_rel(therapist: &str, preset: Difficulty, persona: &str, index: u32) -> String {
    format!("{therapist}/{preset}/transcripts/{persona}__{index}.jsonl")
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

struct Backends {
    therapist: Arc<dyn ChatBackend>,
    client: Arc<dyn ChatBackend>,
    judge: Arc<dyn ChatBackend>,
}

fn run_job(
    job: &Job<'_>,
    config: &ExperimentConfig,
    prompts: &PromptSet,
    factory: &BackendFactory,
) -> Result<JobResult, ExperimentError> {
    let build = |role: &str, d: &BackendDescriptor| {
        factory.chat(d).map_err(|source| ExperimentError::Preflight { role: role.into(), source })
    };
    let b = Backends {
        therapist: build("therapist", job.therapist)?,
        client: build("client", &config.client)?,
        judge: build("judge", &config.judge)?,
    };
    let therapist = dir_label(&job.therapist.display_label());
    let stem = persona_stem(job.persona);
    let rel = transcript_rel(&therapist, job.preset, &stem, job.index);
    let session_config = config.session_config(job.preset, job.therapist, prompts, u64::from(job.index));
    let (mut record, aborted) = match run_session(
        &job.persona.profile,
        b.therapist.as_ref(),
        b.client.as_ref(),
        b.judge.as_ref(),
        &session_config,
    ) {
        Ok(r) => (r, false),
        Err(SessionError::Aborted { turn, source, partial }) => {
            log::warn!("{rel}: aborted at turn {turn}: {source}");
            (*partial, true)
        }
        Err(e) => return Err(ExperimentError::Config(e.to_string())),
    };
    record.profile_ref = stem;
    transcript::persist_record(&record, &config.output_dir.join(&rel))?;

    let mut analysis = SessionAnalysis {
        transcript: rel.clone(),
        strategies: None,
        ctrs: None,
    };
    let mut extraction = None;
    if !aborted {
        if config.embedder.is_some() {
            let extractor = build("extractor", config.extractor_backend())?;
            let params = &config.extractor_backend().params;
            extraction = Some(metrics::extract_diagram(&record, extractor.as_ref(), &prompts.extraction, params));
        }
        if let Some(d) = &config.annotator {
            let annotator = build("annotator", d)?;
            analysis.strategies = analysis::annotate_strategies(&record, annotator.as_ref(), &prompts.strategy, &d.params)
                .map_err(|e| log::warn!("{rel}: annotation skipped: {e}"))
                .ok();
        }
        if let Some(d) = &config.ctrs_judge {
            let judge = build("ctrs_judge", d)?;
            analysis.ctrs = analysis::score_ctrs(&record, judge.as_ref(), prompts, &d.params)
                .map_err(|e| log::warn!("{rel}: CTRS skipped: {e}"))
                .ok();
        }
    }
    Ok(JobResult {
        therapist,
        preset: job.preset,
        transcript: rel,
        record,
        aborted,
        extraction,
        analysis,
    })
}

pub fn preflight(config: &ExperimentConfig) -> Result<(), ExperimentError> {
    config.validate()?;
    for (role, d) in config.roles() {
        d.preflight()
            .map_err(|source| ExperimentError::Preflight { role: role.clone(), source })?;
    }
    config.prompt_set()?;
    Ok(())
}

fn client_type(axis: ClientTypeAxis, preset: Difficulty, profile: &ClientProfile) -> String {
    let level = |l: TraitLevel| l.to_string();
    match axis {
        ClientTypeAxis::Preset => preset.to_string(),
        ClientTypeAxis::Openness => format!("openness_{}", level(profile.openness)),
        ClientTypeAxis::Metacognition => format!("metacognition_{}", level(profile.metacognition)),
    }
}

pub fn run_batch(config: &ExperimentConfig) -> Result<BatchSummary, ExperimentError> {
    run_batch_with(config, &BackendFactory::default())
}

pub fn run_batch_with(config: &ExperimentConfig, factory: &BackendFactory) -> Result<BatchSummary, ExperimentError> {
    preflight(config)?;
    let prompts = config.prompt_set()?;
    let (personas, persona_failures) = load_personas(&config.personas_dir)
        .map_err(|e| ExperimentError::Config(format!("personas_dir: {e}")))?;
    for f in &persona_failures {
        log::error!("persona {} skipped: {}", f.file, f.error);
    }
    let therapists = config.therapist_backends();
    let mut jobs = Vec::new();
    for therapist in &therapists {
        for &preset in &config.presets {
            for persona in &personas {
                for index in 1..=config.sessions_per_cell {
                    jobs.push(Job { therapist, preset, persona, index });
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<JobResult, ExperimentError>> =
        pool.install(|| jobs.par_iter().map(|j| run_job(j, config, &prompts, factory)).collect());
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let embedder = match &config.embedder {
        Some(d) => Some(
            factory
                .embedding(d)
                .map_err(|source| ExperimentError::Preflight { role: "embedder".into(), source })?,
        ),
        None => None,
    };

    let mut cells = Vec::new();
    let mut aborted_all = Vec::new();
    for therapist in &therapists {
        let label = dir_label(&therapist.display_label());
        let mut groups: BTreeMap<String, Vec<AnnotatedUtterance>> = BTreeMap::new();
        let mut group_sessions: BTreeMap<String, Vec<Vec<AnnotatedUtterance>>> = BTreeMap::new();
        for &preset in &config.presets {
            let cell: Vec<&JobResult> = results
                .iter()
                .filter(|r| r.therapist == label && r.preset == preset)
                .collect();
            let aborted: Vec<String> = cell.iter().filter(|r| r.aborted).map(|r| r.transcript.clone()).collect();
            aborted_all.extend(aborted.iter().cloned());
            let done: Vec<&JobResult> = cell.iter().copied().filter(|r| !r.aborted).collect();
            let cell_dir = config.output_dir.join(&label).join(preset.as_str());

            let metrics_written = if done.is_empty() {
                log::error!("{label}/{preset}: no completed sessions, metrics not written");
                false
            } else {
                let report = cell_metrics(&label, preset, &done, aborted.len(), embedder.as_deref(), config)?;
                write_file(&cell_dir.join("metrics.json"), &to_json(&report))?;
                true
            };

            if config.annotator.is_some() || config.ctrs_judge.is_some() {
                for r in &done {
                    if let Some(s) = &r.analysis.strategies {
                        let key = client_type(config.client_type_axis, preset, &r.record.profile);
                        groups.entry(key.clone()).or_default().extend(s.iter().cloned());
                        group_sessions.entry(key).or_default().push(s.clone());
                    }
                }
                let labeled: Vec<Vec<AnnotatedUtterance>> =
                    done.iter().filter_map(|r| r.analysis.strategies.clone()).collect();
                let ctrs: Vec<f64> = done
                    .iter()
                    .filter_map(|r| r.analysis.ctrs.as_ref().and_then(|c| c.normalized))
                    .collect();
                let analysis = CellAnalysis {
                    therapist: label.clone(),
                    preset: preset.to_string(),
                    distribution: analysis::strategy_distribution(&labeled).ok(),
                    ctrs_mean: (!ctrs.is_empty()).then(|| ctrs.iter().sum::<f64>() / ctrs.len() as f64),
                    sessions: done.iter().map(|r| r.analysis.clone()).collect(),
                };
                write_file(&cell_dir.join("analysis.json"), &to_json(&analysis))?;
            }
            cells.push(CellSummary {
                therapist: label.clone(),
                preset,
                sessions: cell.len(),
                aborted,
                metrics_written,
            });
        }
        if !group_sessions.is_empty() {
            write_strategy_tables(&config.output_dir.join(&label), &group_sessions)?;
        }
    }

    let summary = BatchSummary {
        sessions: results.len(),
        aborted: aborted_all,
        persona_failures,
        cells,
    };
    write_file(&config.output_dir.join("batch.json"), &to_json(&summary))?;
    Ok(summary)
}

fn write_strategy_tables(
    dir: &Path,
    group_sessions: &BTreeMap<String, Vec<Vec<AnnotatedUtterance>>>,
) -> Result<(), ExperimentError> {
    let dists: BTreeMap<String, StrategyDistribution> = group_sessions
        .iter()
        .filter_map(|(k, v)| analysis::strategy_distribution(v).ok().map(|d| (k.clone(), d)))
        .collect();
    if dists.is_empty() {
        return Ok(());
    }
    write_file(&dir.join("strategy_distributions.csv"), &analysis::distributions_csv(&dists))?;
    match analysis::distribution_similarity(&dists) {
        Ok(m) => write_file(&dir.join("strategy_similarity.csv"), &m.to_csv())?,
        Err(e) => log::info!("{}: similarity skipped: {e}", dir.display()),
    }
    Ok(())
}

fn cell_metrics(
    therapist: &str,
    preset: Difficulty,
    done: &[&JobResult],
    aborted: usize,
    embedder: Option<&dyn crate::backends::EmbeddingBackend>,
    config: &ExperimentConfig,
) -> Result<MetricsReport, ExperimentError> {
    let records: Vec<SessionRecord> = done.iter().map(|r| r.record.clone()).collect();
    let cder = |scope| metrics::compute_cder(&records, scope).map_err(|e| ExperimentError::Input(e.to_string()));
    let idss = match embedder {
        Some(embedder) => {
            let extractions: Vec<ExtractionResult> = done
                .iter()
                .map(|r| r.extraction.clone().unwrap_or_else(|| Err(metrics::MetricsError::Input("not extracted".into()))))
                .collect();
            let truths: Vec<_> = done.iter().map(|r| &r.record.profile.diagram).collect();
            match metrics::compute_idss(&extractions, &truths, embedder, config.idss_threshold) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::error!("{therapist}/{preset}: IDSS not computed: {e}");
                    None
                }
            }
        }
        None => None,
    };
    let sessions = done
        .iter()
        .enumerate()
        .map(|(i, r)| SessionRow {
            transcript: r.transcript.clone(),
            persona: r.record.profile_ref.clone(),
            termination: r.record.termination,
            turns: r.record.completed_turns(),
            exposure: r.record.final_diagram.exposure_status(),
            extracted: r.extraction.as_ref().and_then(|e| e.as_ref().ok().cloned()),
            idss: idss.as_ref().map(|d| d.sessions[i].clone()),
        })
        .collect();
    Ok(MetricsReport {
        therapist: therapist.into(),
        preset: preset.to_string(),
        session_count: done.len(),
        aborted,
        cder_external: cder(Scope::External)?,
        cder_internal: cder(Scope::Internal)?,
        cder_full: cder(Scope::Full)?,
        idss,
        sessions,
    })
}

// ---------------------------------------------------------------------------
// Dry run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DryRunItem {
    pub therapist: String,
    pub preset: Difficulty,
    pub persona: String,
    pub therapist_prompt: String,
    pub client_prompt: String,
    /// Masked texts found in the therapist prompt; always empty unless a
    /// template is broken.
    pub leaks: Vec<String>,
}

/// Renders the opening prompts of every cell without building a backend.
pub fn dry_run(config: &ExperimentConfig) -> Result<(Vec<DryRunItem>, Vec<PersonaFailure>), ExperimentError> {
    config.validate()?;
    let prompts = config.prompt_set()?;
    let (personas, failures) = load_personas(&config.personas_dir)
        .map_err(|e| ExperimentError::Config(format!("personas_dir: {e}")))?;
    let mut items = Vec::new();
    for therapist in config.therapist_backends() {
        for &preset in &config.presets {
            for persona in &personas {
                let sc = config.session_config(preset, therapist, &prompts, 0);
                let diagram = initialize_mask(&persona.profile, &sc.preset);
                let t = build_therapist_prompt(&persona.profile, &sc)
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
                let c = build_client_prompt(&persona.profile, &diagram, &sc)
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
                items.push(DryRunItem {
                    therapist: therapist.display_label(),
                    preset,
                    persona: persona_stem(persona),
                    leaks: masked_leaks(&t, &diagram),
                    therapist_prompt: t.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n"),
                    client_prompt: c.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n"),
                });
            }
        }
    }
    Ok((items, failures))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}` (text, json, csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub therapist: String,
    pub preset: String,
    pub sessions: usize,
    pub aborted: usize,
    pub cder: [Percent; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idss: Option<[Percent; 5]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctrs: Option<f64>,
}

pub const CDER_COLUMNS: [&str; 3] = ["E", "I", "G"];
pub const IDSS_COLUMNS: [&str; 5] = ["Avg.", "RH", "CB", "IB", "CS"];
pub const SUMMARY_COLUMNS: [&str; 3] = ["CDER", "IDSS", "CTRS"];

/// Collects `metrics.json` (and `analysis.json` when present) from every
/// `{therapist}/{preset}` directory, ordered by preset then therapist.
pub fn collect_rows(dir: &Path) -> Result<Vec<ReportRow>, ExperimentError> {
    if !dir.is_dir() {
        return Err(ExperimentError::Input(format!("{} is not a directory", dir.display())));
    }
    let mut rows = Vec::new();
    let subdirs = |d: &Path| -> Result<Vec<PathBuf>, ExperimentError> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(d)
            .map_err(|e| io_err(d, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for therapist_dir in subdirs(dir)? {
        for cell in subdirs(&therapist_dir)? {
            let path = cell.join("metrics.json");
            if !path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let m: MetricsReport = serde_json::from_str(&text)
                .map_err(|e| ExperimentError::Input(format!("{}: {e}", path.display())))?;
            let apath = cell.join("analysis.json");
            let ctrs = if apath.is_file() {
                let text = std::fs::read_to_string(&apath).map_err(|e| io_err(&apath, e))?;
                let a: CellAnalysis = serde_json::from_str(&text)
                    .map_err(|e| ExperimentError::Input(format!("{}: {e}", apath.display())))?;
                a.ctrs_mean
            } else {
                None
            };
            rows.push(ReportRow {
                therapist: m.therapist.clone(),
                preset: m.preset.clone(),
                sessions: m.session_count,
                aborted: m.aborted,
                cder: m.cder_row(),
                idss: m.idss_row(),
                ctrs,
            });
        }
    }
    if rows.is_empty() {
        return Err(ExperimentError::Input(format!("no batch outputs under {}", dir.display())));
    }
    rows.sort_by(|a, b| preset_order(&a.preset).cmp(&preset_order(&b.preset)).then(a.therapist.cmp(&b.therapist)));
    Ok(rows)
}

fn preset_order(label: &str) -> (usize, String) {
    let idx = label
        .parse::<Difficulty>()
        .ok()
        .and_then(|d| Difficulty::ALL.iter().position(|x| *x == d))
        .unwrap_or(usize::MAX);
    (idx, label.to_string())
}

fn sections(rows: &[ReportRow]) -> Vec<(&str, Vec<&ReportRow>)> {
    let mut out: Vec<(&str, Vec<&ReportRow>)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((p, v)) if *p == r.preset => v.push(r),
            _ => out.push((&r.preset, vec![r])),
        }
    }
    out
}

fn joined<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(sep)
}

fn summary_cells(r: &ReportRow) -> [String; 3] {
    [
        r.cder[2].to_string(),
        r.idss.map(|i| i[0].to_string()).unwrap_or_else(|| "-".into()),
        r.ctrs.map(|c| format!("{c:.2}")).unwrap_or_else(|| "-".into()),
    ]
}

pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            let by_preset: BTreeMap<&str, Vec<&ReportRow>> = sections(rows).into_iter().collect();
            out = to_json(&by_preset);
        }
        ReportFormat::Csv => {
            for (preset, rows) in sections(rows) {
                writeln!(out, "# preset {preset}").unwrap();
                writeln!(out, "{}", MetricsReport::TABLE1_HEADER).unwrap();
                for r in &rows {
                    writeln!(out, "{},{},{}", r.therapist, r.preset, joined(r.cder, ",")).unwrap();
                }
                if rows.iter().any(|r| r.idss.is_some()) {
                    writeln!(out).unwrap();
                    writeln!(out, "therapist,preset,{}", MetricsReport::TABLE2_HEADER).unwrap();
                    for r in rows.iter().filter(|r| r.idss.is_some()) {
                        writeln!(out, "{},{},{}", r.therapist, r.preset, joined(r.idss.unwrap(), ",")).unwrap();
                    }
                }
                writeln!(out).unwrap();
                writeln!(out, "therapist,preset,{}", SUMMARY_COLUMNS.join(",")).unwrap();
                for r in &rows {
                    writeln!(out, "{},{},{}", r.therapist, r.preset, summary_cells(r).join(",")).unwrap();
                }
                writeln!(out).unwrap();
            }
        }
        ReportFormat::Text => {
            for (preset, rows) in sections(rows) {
                writeln!(out, "== {preset} ==").unwrap();
                let width = rows.iter().map(|r| r.therapist.len()).max().unwrap_or(0).max(9);
                writeln!(out, "{:<width$}  {}", "therapist", joined(CDER_COLUMNS.map(|c| format!("{c:>6}")), " ")).unwrap();
                for r in &rows {
                    writeln!(out, "{:<width$}  {}", r.therapist, joined(r.cder.map(|p| format!("{p:>6}")), " ")).unwrap();
                }
                if rows.iter().any(|r| r.idss.is_some()) {
                    writeln!(out).unwrap();
                    writeln!(out, "{:<width$}  {}", "therapist", joined(IDSS_COLUMNS.map(|c| format!("{c:>6}")), " ")).unwrap();
                    for r in rows.iter().filter(|r| r.idss.is_some()) {
                        writeln!(out, "{:<width$}  {}", r.therapist, joined(r.idss.unwrap().map(|p| format!("{p:>6}")), " ")).unwrap();
                    }
                }
                writeln!(out).unwrap();
                writeln!(out, "{:<width$}  {}", "therapist", joined(SUMMARY_COLUMNS.map(|c| format!("{c:>6}")), " ")).unwrap();
                for r in &rows {
                    writeln!(out, "{:<width$}  {}", r.therapist, joined(summary_cells(r).map(|c| format!("{c:>6}")), " ")).unwrap();
                }
                writeln!(out).unwrap();
            }
        }
    }
    out
}

pub fn report(dir: &Path, format: ReportFormat) -> Result<String, ExperimentError> {
    Ok(render_report(&collect_rows(dir)?, format))
}

pub fn replay(path: &Path) -> Result<(String, bool), ExperimentError> {
    let parsed = transcript::read_transcript(path)?;
    Ok((transcript::replay_dump(&parsed), parsed.is_consistent()))
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Reads `Therapist: ...` / `Client: ...` lines. A therapist line opens a
/// new turn; unprefixed lines continue the previous utterance.
pub fn parse_plain_dialogue(text: &str) -> Result<Vec<Utterance>, String> {
    let mut out: Vec<Utterance> = Vec::new();
    let mut turn = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let (speaker, rest) = if let Some(r) = line.strip_prefix("Therapist:") {
            turn += 1;
            (Speaker::Therapist, r)
        } else if let Some(r) = line.strip_prefix("Client:") {
            (Speaker::Client, r)
        } else if let Some(last) = out.last_mut() {
            last.text.push('\n');
            last.text.push_str(line.trim());
            continue;
        } else {
            return Err(format!("line {}: expected `Therapist:` or `Client:`", i + 1));
        };
        let tick = out.len() as u64;
        out.push(Utterance::logical(turn.max(1), speaker, rest.trim(), tick));
    }
    if out.is_empty() {
        return Err("no utterances".into());
    }
    Ok(out)
}

fn load_dialogue(path: &Path) -> Result<Vec<Utterance>, String> {
    if path.extension().is_some_and(|x| x == "jsonl") {
        transcript::load_record(path).map(|r| r.transcript).map_err(|e| e.to_string())
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        parse_plain_dialogue(&text)
    }
}

/// Loads `high/` and `low/` subdirectories of `.jsonl` transcripts or
/// `.txt` dialogues. Unreadable files are returned separately.
pub fn load_labeled(dir: &Path) -> Result<(Vec<LabeledTranscript>, Vec<String>), ExperimentError> {
    let mut items = Vec::new();
    let mut failed = Vec::new();
    for (sub, label) in [("high", QualityLabel::High), ("low", QualityLabel::Low)] {
        let d = dir.join(sub);
        if !d.is_dir() {
            return Err(ExperimentError::Input(format!("missing {}", d.display())));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&d)
            .map_err(|e| io_err(&d, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl" || x == "txt"))
            .collect();
        files.sort();
        for f in files {
            let name = format!("{sub}/{}", file_name(&f));
            match load_dialogue(&f) {
                Ok(dialogue) => items.push(LabeledTranscript { name, dialogue, label }),
                Err(e) => failed.push(format!("{name}: {e}")),
            }
        }
    }
    Ok((items, failed))
}

pub fn calibrate(
    dir: &Path,
    judge: &BackendDescriptor,
    score_threshold: u8,
    prompts: &PromptSet,
    factory: &BackendFactory,
) -> Result<CalibrationReport, ExperimentError> {
    judge
        .preflight()
        .map_err(|source| ExperimentError::Preflight { role: "judge".into(), source })?;
    let (items, failed) = load_labeled(dir)?;
    for f in &failed {
        log::warn!("calibration input skipped: {f}");
    }
    let backend = factory
        .chat(judge)
        .map_err(|source| ExperimentError::Preflight { role: "judge".into(), source })?;
    let mut policy = MediatorPolicy::from_prompts(&DifficultyPreset::easy(), prompts);
    policy.score_threshold = score_threshold;
    let mut report = analysis::judge_calibration(&items, backend.as_ref(), &policy, &judge.params)
        .map_err(|e| ExperimentError::Input(e.to_string()))?;
    for f in failed {
        if f.starts_with("high/") {
            report.high.excluded.push(f);
        } else {
            report.low.excluded.push(f);
        }
    }
    Ok(report)
}
