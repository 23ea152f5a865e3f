//! Factorial sweep over temperature x persona pairing, with per-config
//! atomic persistence and manifest-based resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::ChatBackend;
use crate::codebook::{
    write_ground_truth, write_transcript, CodeValue, Codebook, GroundTruth, Segment,
};
use crate::deliberation::{
    ConsensusOutcome, DeliberationError, DeliberationTrace, Deliberator, Panel, TurnRecord,
};
use crate::extraction::Extractor;
use crate::persona::{AgentProfile, PersonaArchetype};
use crate::prompting::history_window;

pub const DEFAULT_TEMPERATURES: [f64; 3] = [0.0, 0.5, 1.0];

pub const DECISION_HEADER: [&str; 12] = [
    "config_id",
    "model_id",
    "temperature",
    "pairing",
    "congruency",
    "persona_group",
    "segment_id",
    "category",
    "human",
    "single_agent",
    "consensus_final",
    "outcome",
];

pub const RQ1_HEADER: [&str; 7] = [
    "config_id",
    "segment_id",
    "temperature",
    "congruency",
    "first",
    "delayed",
    "none",
];

pub const RQ2_HEADER: [&str; 13] = [
    "config_id",
    "model_id",
    "temperature",
    "pairing",
    "congruency",
    "persona_group",
    "segment_id",
    "category",
    "human",
    "single_agent",
    "consensus_final",
    "single_match",
    "consensus_match",
];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid experiment matrix: {0}")]
    Matrix(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("resume refused: {0}")]
    ResumeRefused(String),
    #[error("decision table {path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("ground truth has no row for segment {0}")]
    GroundTruthCoverage(usize),
    #[error(transparent)]
    Deliberation(#[from] DeliberationError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pairing {
    pub a: PersonaArchetype,
    pub b: PersonaArchetype,
}

impl Pairing {
    pub const fn new(a: PersonaArchetype, b: PersonaArchetype) -> Self {
        Self { a, b }
    }

    /// Three congruent then three incongruent pairings.
    pub fn canonical() -> [Pairing; 6] {
        use PersonaArchetype::*;
        [
            Pairing::new(Balanced, Balanced),
            Pairing::new(Bold, Bold),
            Pairing::new(Empathetic, Empathetic),
            Pairing::new(Bold, Empathetic),
            Pairing::new(Balanced, Bold),
            Pairing::new(Balanced, Empathetic),
        ]
    }

    pub fn congruency(self) -> Congruency {
        if self.a == self.b {
            Congruency::Congruent
        } else {
            Congruency::Incongruent
        }
    }

    pub fn persona_group(self) -> PersonaGroup {
        let has = |p| self.a == p || self.b == p;
        match (has(PersonaArchetype::Bold), has(PersonaArchetype::Empathetic)) {
            (true, true) => PersonaGroup::HasBoth,
            (true, false) => PersonaGroup::HasBold,
            (false, true) => PersonaGroup::HasEmpathetic,
            (false, false) => PersonaGroup::NeutralOnly,
        }
    }

    fn unordered(self) -> (PersonaArchetype, PersonaArchetype) {
        (self.a.min(self.b), self.a.max(self.b))
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

impl FromStr for Pairing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| format!("pairing {s:?} must look like bold-empathetic"))?;
        Ok(Pairing::new(a.parse()?, b.parse()?))
    }
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $text),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s.trim() { $($text => Some(Self::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

text_enum!(Congruency {
    Congruent => "congruent",
    Incongruent => "incongruent",
});

text_enum!(PersonaGroup {
    HasBold => "has_bold",
    HasEmpathetic => "has_empathetic",
    HasBoth => "has_both",
    NeutralOnly => "neutral_only",
});

/// `0.5` -> `"0.5"`, `0.0` -> `"0.0"`.
pub fn format_temperature(t: f64) -> String {
    let s = format!("{t}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub config_id: String,
    pub model_id: String,
    pub temperature: f64,
    pub pairing: Pairing,
    pub congruency: Congruency,
    pub persona_group: PersonaGroup,
}

impl ExperimentConfig {
    pub fn new(model_id: &str, temperature: f64, pairing: Pairing) -> Self {
        Self {
            config_id: format!("{model_id}__t{}__{pairing}", format_temperature(temperature)),
            model_id: model_id.to_string(),
            temperature,
            pairing,
            congruency: pairing.congruency(),
            persona_group: pairing.persona_group(),
        }
    }

    pub fn panel(&self) -> Panel {
        Panel::new(self.pairing.a, self.pairing.b, self.temperature)
    }

    /// File-system-safe form of the config id.
    pub fn file_stem(&self) -> String {
        self.config_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
            .collect()
    }
}

/// Cartesian product models x temperatures x pairings, in that nesting order.
pub fn build_matrix(
    models: &[String],
    temperatures: &[f64],
    pairings: &[Pairing],
) -> Result<Vec<ExperimentConfig>, RunError> {
    if models.is_empty() || temperatures.is_empty() || pairings.is_empty() {
        return Err(RunError::Matrix("models, temperatures and pairings must be non-empty".into()));
    }
    let mut seen = BTreeSet::new();
    for p in pairings {
        if !seen.insert(p.unordered()) {
            return Err(RunError::Matrix(format!("duplicate pairing {p}")));
        }
    }
    let mut temps_seen = Vec::new();
    for &t in temperatures {
        if !(0.0..=1.0).contains(&t) {
            return Err(RunError::Matrix(format!("temperature {t} outside [0, 1]")));
        }
        if temps_seen.contains(&t) {
            return Err(RunError::Matrix(format!("duplicate temperature {t}")));
        }
        temps_seen.push(t);
    }
    let mut model_seen = BTreeSet::new();
    for m in models {
        if m.trim().is_empty() || !model_seen.insert(m.as_str()) {
            return Err(RunError::Matrix(format!("empty or duplicate model id {m:?}")));
        }
    }
    Ok(models
        .iter()
        .flat_map(|m| {
            temperatures
                .iter()
                .flat_map(move |&t| pairings.iter().map(move |&p| ExperimentConfig::new(m, t, p)))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub config_id: String,
    pub model_id: String,
    pub temperature: f64,
    pub pairing: Pairing,
    pub congruency: Congruency,
    pub persona_group: PersonaGroup,
    pub segment_id: usize,
    pub category: String,
    pub human: bool,
    pub single_agent: CodeValue,
    pub consensus_final: CodeValue,
    pub outcome: ConsensusOutcome,
}

impl DecisionRecord {
    fn cells(&self) -> [String; 12] {
        [
            self.config_id.clone(),
            self.model_id.clone(),
            format_temperature(self.temperature),
            self.pairing.to_string(),
            self.congruency.to_string(),
            self.persona_group.to_string(),
            self.segment_id.to_string(),
            self.category.clone(),
            u8::from(self.human).to_string(),
            self.single_agent.to_string(),
            self.consensus_final.to_string(),
            self.outcome.as_str().to_string(),
        ]
    }
}

/// Shared dataset for every configuration.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub codebook: Codebook,
    pub segments: Vec<Segment>,
    pub ground_truth: Vec<GroundTruth>,
}

impl Dataset {
    pub fn new(codebook: Codebook, segments: Vec<Segment>, ground_truth: Vec<GroundTruth>) -> Result<Self, RunError> {
        let covered: BTreeSet<usize> = ground_truth.iter().map(|g| g.segment_id).collect();
        if let Some(s) = segments.iter().find(|s| !covered.contains(&s.id)) {
            return Err(RunError::GroundTruthCoverage(s.id));
        }
        Ok(Self {
            codebook,
            segments,
            ground_truth,
        })
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.codebook.to_toml_string().as_bytes());
        h.update([0]);
        h.update(write_transcript(&self.segments).as_bytes());
        h.update([0]);
        h.update(write_ground_truth(&self.codebook, &self.ground_truth).as_bytes());
        hex::encode(h.finalize())
    }

    fn truth(&self, segment_id: usize) -> &GroundTruth {
        self.ground_truth
            .iter()
            .find(|g| g.segment_id == segment_id)
            .expect("coverage checked in Dataset::new")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub max_rounds: u32,
    pub history_window: usize,
    pub seed: Option<u64>,
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after executing this many configurations (the rest stay pending).
    pub config_limit: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_rounds: 2,
            history_window: 10,
            seed: None,
            workers: 4,
            out_dir: None,
            resume: false,
            config_limit: None,
        }
    }
}

impl RunOptions {
    fn settings_digest(&self) -> String {
        let text = format!(
            "max_rounds={};history_window={};seed={:?}",
            self.max_rounds, self.history_window, self.seed
        );
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigStatus {
    Pending,
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub config_id: String,
    pub status: ConfigStatus,
    pub segments: usize,
    pub failed_segments: usize,
    pub decisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub dataset_digest: String,
    pub settings_digest: String,
    pub codebook_version: String,
    #[serde(rename = "config")]
    pub configs: Vec<ConfigEntry>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.toml";

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| RunError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn entry(&self, config_id: &str) -> Option<&ConfigEntry> {
        self.configs.iter().find(|c| c.config_id == config_id)
    }

    fn entry_mut(&mut self, config_id: &str) -> &mut ConfigEntry {
        self.configs
            .iter_mut()
            .find(|c| c.config_id == config_id)
            .expect("config in manifest")
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TraceEntry {
    Completed(Box<DeliberationTrace>),
    Failed(FailedSegment),
}

impl TraceEntry {
    pub fn segment_id(&self) -> usize {
        match self {
            TraceEntry::Completed(t) => t.segment_id,
            TraceEntry::Failed(f) => f.segment_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSegment {
    pub config_id: String,
    pub segment_id: usize,
    pub stage: String,
    pub error: String,
    pub partial_turns: Vec<TurnRecord>,
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceEntry>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| RunError::Manifest {
                path: path.to_path_buf(),
                message: format!("trace line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Traces of configurations executed in this invocation, in config order.
    pub traces: Vec<TraceEntry>,
    /// Decision rows of every finished configuration, in table order.
    pub records: Vec<DecisionRecord>,
    pub manifest: RunManifest,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed_segments: usize,
}

impl RunOutput {
    /// Every configuration finished without failures.
    pub fn is_complete(&self) -> bool {
        self.manifest
            .configs
            .iter()
            .all(|c| c.status == ConfigStatus::Complete && c.failed_segments == 0)
    }

    pub fn incomplete(&self) -> Vec<&str> {
        self.manifest
            .configs
            .iter()
            .filter(|c| c.status != ConfigStatus::Complete)
            .map(|c| c.config_id.as_str())
            .collect()
    }
}

fn outcome_of(entry: &TraceEntry) -> Option<&DeliberationTrace> {
    match entry {
        TraceEntry::Completed(t) => Some(t),
        TraceEntry::Failed(_) => None,
    }
}

/// Runs one session (control coder, then deliberation) for one segment.
fn run_segment<B: ChatBackend + ?Sized>(
    config: &ExperimentConfig,
    dataset: &Dataset,
    index: usize,
    backend: &B,
    extractor: &Extractor,
    options: &RunOptions,
) -> TraceEntry {
    let segment = &dataset.segments[index];
    let history = history_window(&dataset.segments, index, options.history_window);
    let deliberator = Deliberator::new(backend, extractor, &config.model_id, &config.config_id, options.seed);
    let single = AgentProfile::single_coder(config.temperature);
    let failed = |stage: &str, e: DeliberationError| {
        let partial_turns = match &e {
            DeliberationError::Transport { partial_turns, .. } => partial_turns.clone(),
            _ => Vec::new(),
        };
        warn!("{}: segment {} failed during {stage}: {e}", config.config_id, segment.id);
        TraceEntry::Failed(FailedSegment {
            config_id: config.config_id.clone(),
            segment_id: segment.id,
            stage: stage.to_string(),
            error: e.to_string(),
            partial_turns,
        })
    };
    let (single_codes, single_turn) = match deliberator.run_single_agent(segment, &single, history) {
        Ok(x) => x,
        Err(e) => return failed("single_agent", e),
    };
    match deliberator.run_deliberation(segment, &config.panel(), history, options.max_rounds) {
        Ok(mut trace) => {
            trace.single_agent_codes = Some(single_codes);
            trace.single_agent_turn = Some(single_turn);
            TraceEntry::Completed(Box::new(trace))
        }
        Err(e) => failed("deliberation", e),
    }
}

/// Expands completed traces into one row per category, in segment then
/// codebook order.
pub fn expand_records(config: &ExperimentConfig, dataset: &Dataset, entries: &[TraceEntry]) -> Vec<DecisionRecord> {
    let mut rows = Vec::new();
    for trace in entries.iter().filter_map(outcome_of) {
        let truth = dataset.truth(trace.segment_id);
        let single = trace.single_agent_codes.as_ref();
        for name in dataset.codebook.names() {
            rows.push(DecisionRecord {
                config_id: config.config_id.clone(),
                model_id: config.model_id.clone(),
                temperature: config.temperature,
                pairing: config.pairing,
                congruency: config.congruency,
                persona_group: config.persona_group,
                segment_id: trace.segment_id,
                category: name.to_string(),
                human: truth.assignment.get(name) == Some(CodeValue::Present),
                single_agent: single.and_then(|s| s.get(name)).unwrap_or(CodeValue::Missing),
                consensus_final: trace.final_codes.get(name).unwrap_or(CodeValue::Missing),
                outcome: trace.outcome,
            });
        }
    }
    rows
}

/// Executes every configuration (skipping finished ones when resuming) and
/// returns the traces, decision rows and manifest.
pub fn run_experiment<B: ChatBackend + ?Sized>(
    configs: &[ExperimentConfig],
    dataset: &Dataset,
    backend: &B,
    extractor: &Extractor,
    options: &RunOptions,
) -> Result<RunOutput, RunError> {
    if options.max_rounds == 0 {
        return Err(DeliberationError::InvalidMaxRounds.into());
    }
    let mut ordered: Vec<&ExperimentConfig> = configs.iter().collect();
    ordered.sort_by(|a, b| a.config_id.cmp(&b.config_id));
    if ordered.windows(2).any(|w| w[0].config_id == w[1].config_id) {
        return Err(RunError::Matrix("duplicate config_id".into()));
    }

    let store = options.out_dir.as_deref().map(Store::new);
    let fresh = RunManifest {
        engine_version: crate::ENGINE_VERSION.to_string(),
        dataset_digest: dataset.digest(),
        settings_digest: options.settings_digest(),
        codebook_version: dataset.codebook.version().to_string(),
        configs: ordered
            .iter()
            .map(|c| ConfigEntry {
                config_id: c.config_id.clone(),
                status: ConfigStatus::Pending,
                segments: dataset.segments.len(),
                failed_segments: 0,
                decisions: 0,
            })
            .collect(),
    };
    let mut manifest = match &store {
        Some(store) => store.open_manifest(fresh, options.resume)?,
        None => fresh,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| RunError::Matrix(format!("worker pool: {e}")))?;

    let mut traces = Vec::new();
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    let mut failed_segments = 0;
    let mut parts: BTreeMap<String, Vec<DecisionRecord>> = BTreeMap::new();

    for config in &ordered {
        let status = manifest.entry(&config.config_id).map(|e| e.status);
        if status == Some(ConfigStatus::Complete) {
            if let Some(store) = &store {
                parts.insert(config.config_id.clone(), store.read_part(config)?);
            }
            skipped.push(config.config_id.clone());
            continue;
        }
        if options.config_limit.is_some_and(|limit| executed.len() >= limit) {
            continue;
        }
        info!("running {} ({} segments)", config.config_id, dataset.segments.len());
        let entries: Vec<TraceEntry> = pool.install(|| {
            (0..dataset.segments.len())
                .into_par_iter()
                .map(|i| run_segment(config, dataset, i, backend, extractor, options))
                .collect()
        });
        let failures = entries.iter().filter(|e| matches!(e, TraceEntry::Failed(_))).count();
        let rows = expand_records(config, dataset, &entries);
        if let Some(store) = &store {
            store.write_traces(config, &entries)?;
            store.write_part(config, &rows)?;
        }
        let entry = manifest.entry_mut(&config.config_id);
        entry.status = if failures == 0 {
            ConfigStatus::Complete
        } else {
            ConfigStatus::Incomplete
        };
        entry.failed_segments = failures;
        entry.decisions = rows.len();
        if let Some(store) = &store {
            store.write_manifest(&manifest)?;
        }
        failed_segments += failures;
        executed.push(config.config_id.clone());
        parts.insert(config.config_id.clone(), rows);
        traces.extend(entries);
        info!(
            "finished {} ({} failed segment(s))",
            config.config_id, failures
        );
    }

    let records: Vec<DecisionRecord> = parts.into_values().flatten().collect();
    if let Some(store) = &store {
        store.write_decisions(&records)?;
        store.write_manifest(&manifest)?;
    }
    Ok(RunOutput {
        traces,
        records,
        manifest,
        executed,
        skipped,
        failed_segments,
    })
}

struct Store {
    root: PathBuf,
}

impl Store {
    fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join(RunManifest::FILE)
    }

    fn trace_path(&self, config: &ExperimentConfig) -> PathBuf {
        self.root.join("traces").join(format!("{}.jsonl", config.file_stem()))
    }

    fn part_path(&self, config: &ExperimentConfig) -> PathBuf {
        self.root.join("decisions").join(format!("{}.csv", config.file_stem()))
    }

    fn open_manifest(&self, fresh: RunManifest, resume: bool) -> Result<RunManifest, RunError> {
        let path = self.manifest_path();
        if !path.exists() {
            fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
            return Ok(fresh);
        }
        if !resume {
            return Err(RunError::ResumeRefused(format!(
                "{} already holds a run; pass --resume or choose another out_dir",
                self.root.display()
            )));
        }
        let old = RunManifest::load(&path)?;
        if old.dataset_digest != fresh.dataset_digest {
            return Err(RunError::ResumeRefused(format!(
                "dataset digest changed ({} -> {})",
                &old.dataset_digest[..12.min(old.dataset_digest.len())],
                &fresh.dataset_digest[..12]
            )));
        }
        if old.settings_digest != fresh.settings_digest {
            return Err(RunError::ResumeRefused(
                "run settings (max_rounds, history_window, seed) changed".into(),
            ));
        }
        if old.codebook_version != fresh.codebook_version {
            return Err(RunError::ResumeRefused("codebook version changed".into()));
        }
        let mut merged = fresh;
        for entry in &mut merged.configs {
            if let Some(prev) = old.entry(&entry.config_id) {
                if prev.status == ConfigStatus::Complete {
                    *entry = prev.clone();
                }
            }
        }
        Ok(merged)
    }

    fn write_manifest(&self, manifest: &RunManifest) -> Result<(), RunError> {
        let text = toml::to_string(manifest).map_err(|e| RunError::Manifest {
            path: self.manifest_path(),
            message: e.to_string(),
        })?;
        write_atomic(&self.manifest_path(), text.as_bytes())
    }

    fn write_traces(&self, config: &ExperimentConfig, entries: &[TraceEntry]) -> Result<(), RunError> {
        let mut buf = Vec::new();
        for entry in entries {
            serde_json::to_writer(&mut buf, entry).expect("trace serializes");
            buf.push(b'\n');
        }
        write_atomic(&self.trace_path(config), &buf)
    }

    fn write_part(&self, config: &ExperimentConfig, rows: &[DecisionRecord]) -> Result<(), RunError> {
        write_atomic(&self.part_path(config), &decision_table_bytes(rows))
    }

    fn read_part(&self, config: &ExperimentConfig) -> Result<Vec<DecisionRecord>, RunError> {
        read_decision_table(&self.part_path(config))
    }

    fn write_decisions(&self, rows: &[DecisionRecord]) -> Result<(), RunError> {
        write_atomic(&self.root.join("decisions.csv"), &decision_table_bytes(rows))
    }
}

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        file.write_all(bytes).map_err(io_err(&tmp))?;
        file.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn decision_table_bytes(rows: &[DecisionRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DECISION_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record(r.cells()).expect("in-memory write");
    }
    w.into_inner().expect("flush")
}

pub fn read_decision_table(path: &Path) -> Result<Vec<DecisionRecord>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_decision_table(&text, path)
}

pub fn parse_decision_table(text: &str, origin: &Path) -> Result<Vec<DecisionRecord>, RunError> {
    let schema = |message: String| RunError::Schema {
        path: origin.to_path_buf(),
        message,
    };
    if text.trim().is_empty() {
        return Err(schema("table is empty".into()));
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| schema(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut index = [0usize; 12];
    for (slot, col) in index.iter_mut().zip(DECISION_HEADER) {
        *slot = header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| schema(format!("missing column {col:?}")))?;
    }
    if let Some(extra) = header.iter().find(|h| !DECISION_HEADER.contains(&h.as_str())) {
        return Err(schema(format!("unexpected column {extra:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| schema(format!("line {line}: {e}")))?;
        let cell = |k: usize| rec.get(index[k]).unwrap_or("").trim();
        let bad = |col: &str, v: &str| schema(format!("line {line}: column {col:?}: bad value {v:?}"));
        let value = |k: usize| CodeValue::parse(cell(k)).ok_or_else(|| bad(DECISION_HEADER[k], cell(k)));
        let human = match cell(8) {
            "1" => true,
            "0" => false,
            v => return Err(bad("human", v)),
        };
        rows.push(DecisionRecord {
            config_id: cell(0).to_string(),
            model_id: cell(1).to_string(),
            temperature: cell(2).parse().map_err(|_| bad("temperature", cell(2)))?,
            pairing: cell(3).parse().map_err(|_| bad("pairing", cell(3)))?,
            congruency: Congruency::parse(cell(4)).ok_or_else(|| bad("congruency", cell(4)))?,
            persona_group: PersonaGroup::parse(cell(5)).ok_or_else(|| bad("persona_group", cell(5)))?,
            segment_id: cell(6).parse().map_err(|_| bad("segment_id", cell(6)))?,
            category: cell(7).to_string(),
            human,
            single_agent: value(9)?,
            consensus_final: value(10)?,
            outcome: ConsensusOutcome::parse(cell(11)).ok_or_else(|| bad("outcome", cell(11)))?,
        });
    }
    if rows.is_empty() {
        return Err(schema("table has no rows".into()));
    }
    Ok(rows)
}

/// Segment-level consensus event (one-hot outcome) for consensus modelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusEvent {
    pub config_id: String,
    pub model_id: String,
    pub segment_id: usize,
    pub temperature: f64,
    pub congruency: Congruency,
    pub persona_group: PersonaGroup,
    pub outcome: ConsensusOutcome,
}

/// One event per (config, segment), in table order.
pub fn consensus_events(records: &[DecisionRecord]) -> Vec<ConsensusEvent> {
    let mut seen = BTreeSet::new();
    let mut events = Vec::new();
    for r in records {
        if seen.insert((r.config_id.clone(), r.segment_id)) {
            events.push(ConsensusEvent {
                config_id: r.config_id.clone(),
                model_id: r.model_id.clone(),
                segment_id: r.segment_id,
                temperature: r.temperature,
                congruency: r.congruency,
                persona_group: r.persona_group,
                outcome: r.outcome,
            });
        }
    }
    events
}

fn match_cell(machine: CodeValue, human: bool) -> &'static str {
    match machine.as_bit() {
        Some(bit) if bit == human => "1",
        Some(_) => "0",
        None => "NA",
    }
}

/// Long-format tables for external mixed-effects modelling:
/// `(rq1 consensus events, rq2 per-decision rows)` as CSV bytes.
pub fn export_model_ready(records: &[DecisionRecord]) -> (Vec<u8>, Vec<u8>) {
    let mut rq1 = csv::Writer::from_writer(Vec::new());
    rq1.write_record(RQ1_HEADER).expect("in-memory write");
    for e in consensus_events(records) {
        let one_hot = |o: ConsensusOutcome| if e.outcome == o { "1" } else { "0" };
        rq1.write_record([
            e.config_id.as_str(),
            &e.segment_id.to_string(),
            &format_temperature(e.temperature),
            e.congruency.as_str(),
            one_hot(ConsensusOutcome::FirstConsensus),
            one_hot(ConsensusOutcome::DelayedConsensus),
            one_hot(ConsensusOutcome::NoConsensus),
        ])
        .expect("in-memory write");
    }
    let mut rq2 = csv::Writer::from_writer(Vec::new());
    rq2.write_record(RQ2_HEADER).expect("in-memory write");
    for r in records {
        let c = r.cells();
        rq2.write_record([
            &c[0],
            &c[1],
            &c[2],
            &c[3],
            &c[4],
            &c[5],
            &c[6],
            &c[7],
            &c[8],
            &c[9],
            &c[10],
            match_cell(r.single_agent, r.human),
            match_cell(r.consensus_final, r.human),
        ])
        .expect("in-memory write");
    }
    (
        rq1.into_inner().expect("flush"),
        rq2.into_inner().expect("flush"),
    )
}
