//! Aggregate metrics over the decision table: agreement with human codes,
//! consensus-outcome frequencies, consensus-vs-single differences and the
//! FDR-controlled contrast family.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::CodeValue;
use crate::deliberation::ConsensusOutcome;
use crate::experiment::{
    export_model_ready, format_temperature, read_decision_table, write_atomic, DecisionRecord,
    PersonaGroup, RunError,
};
use crate::stats::{bh_adjust, cohens_kappa, paired_t, wald_interval, wilson_interval, Interval, StatsError};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Table(#[from] RunError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// How a machine label that could not be extracted is scored against the
/// human code.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Missing counts as a disagreement and stays in the denominator.
    #[default]
    CountAsDisagree,
    /// Missing decisions are dropped from the denominator.
    Exclude,
}

impl MissingPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CountAsDisagree => "count_as_disagree",
            Self::Exclude => "exclude",
        }
    }

    /// `Some(agrees)` or `None` when the decision is excluded.
    pub fn score(self, machine: CodeValue, human: bool) -> Option<bool> {
        match (machine.as_bit(), self) {
            (Some(bit), _) => Some(bit == human),
            (None, Self::CountAsDisagree) => Some(false),
            (None, Self::Exclude) => None,
        }
    }
}

impl fmt::Display for MissingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MissingPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "count_as_disagree" => Ok(Self::CountAsDisagree),
            "exclude" => Ok(Self::Exclude),
            other => Err(format!("unknown missing policy {other:?} (count_as_disagree|exclude)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Consensus,
    Single,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Consensus => "consensus",
            Self::Single => "single",
        }
    }

    fn value(self, r: &DecisionRecord) -> CodeValue {
        match self {
            Self::Consensus => r.consensus_final,
            Self::Single => r.single_agent,
        }
    }
}

/// Which unit supplies the paired observations of a contrast.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingUnit {
    /// One pair per segment, averaged over the configs in the cell.
    #[default]
    Segment,
    /// One pair per configuration, averaged over segments.
    Config,
}

impl PairingUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Segment => "segment",
            Self::Config => "config",
        }
    }
}

impl FromStr for PairingUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "segment" => Ok(Self::Segment),
            "config" => Ok(Self::Config),
            other => Err(format!("unknown pairing unit {other:?} (segment|config)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    Model,
    Config,
    Temperature,
    Pairing,
    Congruency,
    PersonaGroup,
    Category,
}

impl GroupField {
    pub fn column(self) -> &'static str {
        match self {
            Self::Model => "model_id",
            Self::Config => "config_id",
            Self::Temperature => "temperature",
            Self::Pairing => "pairing",
            Self::Congruency => "congruency",
            Self::PersonaGroup => "persona_group",
            Self::Category => "category",
        }
    }

    fn value(self, r: &DecisionRecord) -> String {
        match self {
            Self::Model => r.model_id.clone(),
            Self::Config => r.config_id.clone(),
            Self::Temperature => format_temperature(r.temperature),
            Self::Pairing => r.pairing.to_string(),
            Self::Congruency => r.congruency.to_string(),
            Self::PersonaGroup => r.persona_group.to_string(),
            Self::Category => r.category.clone(),
        }
    }
}

fn key(r: &DecisionRecord, fields: &[GroupField]) -> Vec<String> {
    fields.iter().map(|f| f.value(r)).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Tally {
    agree: u64,
    scored: u64,
    excluded: u64,
    machine: Vec<bool>,
    human: Vec<bool>,
}

impl Tally {
    fn add(&mut self, machine: CodeValue, human: bool, policy: MissingPolicy) {
        match policy.score(machine, human) {
            Some(agrees) => {
                self.scored += 1;
                self.agree += u64::from(agrees);
                // For kappa a missing label under count_as_disagree is the
                // opposite of the human code.
                self.machine.push(machine.as_bit().unwrap_or(!human));
                self.human.push(human);
            }
            None => self.excluded += 1,
        }
    }

    fn rate(&self) -> Option<f64> {
        (self.scored > 0).then(|| self.agree as f64 / self.scored as f64)
    }
}

fn tally(records: &[DecisionRecord], fields: &[GroupField], source: Source, policy: MissingPolicy) -> BTreeMap<Vec<String>, Tally> {
    let mut groups: BTreeMap<Vec<String>, Tally> = BTreeMap::new();
    for r in records {
        groups.entry(key(r, fields)).or_default().add(source.value(r), r.human, policy);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub group: Vec<String>,
    pub source: Source,
    pub policy: MissingPolicy,
    pub n: u64,
    pub agree: u64,
    pub excluded: u64,
    pub rate: Option<f64>,
    pub wilson: Option<Interval>,
    pub wald: Option<Interval>,
    pub kappa: Option<f64>,
    pub kappa_degenerate: bool,
}

/// Agreement of one source with the human codes, per group.
pub fn agreement_rate(
    records: &[DecisionRecord],
    fields: &[GroupField],
    source: Source,
    policy: MissingPolicy,
    level: f64,
) -> Result<Vec<AgreementRow>, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    tally(records, fields, source, policy)
        .into_iter()
        .map(|(group, t)| {
            let (wilson, wald, kappa) = if t.scored > 0 {
                (
                    Some(wilson_interval(t.agree, t.scored, level)?),
                    Some(wald_interval(t.agree, t.scored, level)?),
                    Some(cohens_kappa(&t.machine, &t.human)?),
                )
            } else {
                (None, None, None)
            };
            Ok(AgreementRow {
                group,
                source,
                policy,
                n: t.scored,
                agree: t.agree,
                excluded: t.excluded,
                rate: t.rate(),
                wilson,
                wald,
                kappa: kappa.map(|k| k.kappa),
                kappa_degenerate: kappa.is_some_and(|k| k.degenerate),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub group: Vec<String>,
    pub segments: u64,
    pub first: u64,
    pub delayed: u64,
    pub none: u64,
}

impl FrequencyRow {
    pub fn proportions(&self) -> [f64; 3] {
        let n = self.segments as f64;
        [self.first as f64 / n, self.delayed as f64 / n, self.none as f64 / n]
    }
}

/// Outcome frequencies over (config, segment) sessions per group.
/// `Category` is not a session attribute and is ignored if given.
pub fn consensus_frequencies(records: &[DecisionRecord], fields: &[GroupField]) -> Result<Vec<FrequencyRow>, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    let fields: Vec<GroupField> = fields.iter().copied().filter(|f| *f != GroupField::Category).collect();
    let mut seen = std::collections::BTreeSet::new();
    let mut groups: BTreeMap<Vec<String>, FrequencyRow> = BTreeMap::new();
    for r in records {
        if !seen.insert((r.config_id.as_str(), r.segment_id)) {
            continue;
        }
        let k = key(r, &fields);
        let row = groups.entry(k.clone()).or_insert_with(|| FrequencyRow {
            group: k,
            segments: 0,
            first: 0,
            delayed: 0,
            none: 0,
        });
        row.segments += 1;
        match r.outcome {
            ConsensusOutcome::FirstConsensus => row.first += 1,
            ConsensusOutcome::DelayedConsensus => row.delayed += 1,
            ConsensusOutcome::NoConsensus => row.none += 1,
        }
    }
    Ok(groups.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub group: Vec<String>,
    pub consensus_n: u64,
    pub consensus_rate: Option<f64>,
    pub single_n: u64,
    pub single_rate: Option<f64>,
    /// `consensus_rate - single_rate`.
    pub diff: Option<f64>,
}

/// Difference in human agreement between consensus and single-agent codes.
pub fn alignment_diff(records: &[DecisionRecord], fields: &[GroupField], policy: MissingPolicy) -> Result<Vec<AlignmentRow>, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    let consensus = tally(records, fields, Source::Consensus, policy);
    let single = tally(records, fields, Source::Single, policy);
    Ok(consensus
        .into_iter()
        .zip(single)
        .map(|((group, c), (_, s))| {
            let (cr, sr) = (c.rate(), s.rate());
            AlignmentRow {
                group,
                consensus_n: c.scored,
                consensus_rate: cr,
                single_n: s.scored,
                single_rate: sr,
                diff: cr.zip(sr).map(|(a, b)| a - b),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MasBetter,
    SingleBetter,
    #[serde(rename = "none")]
    NoDifference,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MasBetter => "mas_better",
            Self::SingleBetter => "single_better",
            Self::NoDifference => "none",
        }
    }
}

/// One consensus-vs-single paired comparison within a model x category x
/// persona group x temperature cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub model_id: String,
    pub category: String,
    pub persona_group: PersonaGroup,
    pub temperature: String,
    pub unit: PairingUnit,
    pub n_pairs: usize,
    pub mean_consensus: Option<f64>,
    pub mean_single: Option<f64>,
    pub mean_diff: Option<f64>,
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p_value: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub degenerate: bool,
    pub direction: Direction,
}

impl Contrast {
    pub fn is_significant(&self, alpha: f64) -> bool {
        self.p_adjusted.is_some_and(|q| q < alpha)
    }
}

#[derive(Default)]
struct PairTally {
    consensus: (u64, u64),
    single: (u64, u64),
}

fn bump(slot: &mut (u64, u64), score: Option<bool>) {
    if let Some(agrees) = score {
        slot.0 += u64::from(agrees);
        slot.1 += 1;
    }
}

/// Paired consensus-vs-single contrasts, BH-adjusted across the family.
/// Cells made only of neutral pairings are not part of the family.
pub fn contrasts(records: &[DecisionRecord], policy: MissingPolicy, unit: PairingUnit) -> Result<Vec<Contrast>, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    type Cell = (String, String, PersonaGroup, String);
    let mut cells: BTreeMap<Cell, BTreeMap<String, PairTally>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.persona_group != PersonaGroup::NeutralOnly) {
        let cell = (
            r.model_id.clone(),
            r.category.clone(),
            r.persona_group,
            format_temperature(r.temperature),
        );
        let unit_key = match unit {
            PairingUnit::Segment => format!("{:012}", r.segment_id),
            PairingUnit::Config => r.config_id.clone(),
        };
        let t = cells.entry(cell).or_default().entry(unit_key).or_default();
        bump(&mut t.consensus, policy.score(r.consensus_final, r.human));
        bump(&mut t.single, policy.score(r.single_agent, r.human));
    }

    let mut out = Vec::with_capacity(cells.len());
    for ((model_id, category, persona_group, temperature), units) in cells {
        let pairs: Vec<(f64, f64)> = units
            .values()
            .filter(|t| t.consensus.1 > 0 && t.single.1 > 0)
            .map(|t| {
                (
                    t.consensus.0 as f64 / t.consensus.1 as f64,
                    t.single.0 as f64 / t.single.1 as f64,
                )
            })
            .collect();
        let mean = |f: fn(&(f64, f64)) -> f64| {
            (!pairs.is_empty()).then(|| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64)
        };
        let mean_consensus = mean(|p| p.0);
        let mean_single = mean(|p| p.1);
        let test = match paired_t(&pairs) {
            Ok(t) => Some(t),
            Err(StatsError::TooFewPairs(_)) => None,
            Err(e) => return Err(e),
        };
        let mean_diff = test.map(|t| t.mean_diff).or(mean_consensus.zip(mean_single).map(|(a, b)| a - b));
        let direction = match mean_diff {
            Some(d) if d > 0.0 => Direction::MasBetter,
            Some(d) if d < 0.0 => Direction::SingleBetter,
            _ => Direction::NoDifference,
        };
        out.push(Contrast {
            model_id,
            category,
            persona_group,
            temperature,
            unit,
            n_pairs: pairs.len(),
            mean_consensus,
            mean_single,
            mean_diff,
            t: test.and_then(|t| t.t),
            df: test.map(|t| t.df),
            p_value: test.map(|t| t.p_value),
            p_adjusted: None,
            degenerate: test.is_some_and(|t| t.degenerate),
            direction,
        });
    }

    let tested: Vec<usize> = (0..out.len()).filter(|&i| out[i].p_value.is_some()).collect();
    let raw: Vec<f64> = tested.iter().map(|&i| out[i].p_value.unwrap_or(1.0)).collect();
    for (&i, q) in tested.iter().zip(bh_adjust(&raw)?) {
        out[i].p_adjusted = Some(q);
    }
    Ok(out)
}

/// Contrasts whose BH-adjusted p-value falls below `alpha`.
pub fn significant_contrasts(contrasts: &[Contrast], alpha: f64) -> Vec<&Contrast> {
    contrasts.iter().filter(|c| c.is_significant(alpha)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub policy: MissingPolicy,
    pub unit: PairingUnit,
    pub alpha: f64,
    pub level: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            policy: MissingPolicy::default(),
            unit: PairingUnit::default(),
            alpha: DEFAULT_ALPHA,
            level: DEFAULT_LEVEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSummary {
    pub decisions: usize,
    pub contrasts: usize,
    pub tested: usize,
    pub mas_better: usize,
    pub single_better: usize,
    pub files: Vec<PathBuf>,
}

pub const AGREEMENT_FIELDS: [GroupField; 3] = [GroupField::Model, GroupField::Config, GroupField::Category];
pub const FREQUENCY_FIELDS: [GroupField; 2] = [GroupField::Model, GroupField::Config];

/// Number formatting shared by every output table; deterministic and
/// round-trippable.
pub fn num(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-4 {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "NA".into())
}

fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("flush")
}

fn headed(fields: &[GroupField], rest: &[&'static str]) -> Vec<&'static str> {
    fields.iter().map(|f| f.column()).chain(rest.iter().copied()).collect()
}

pub fn agreement_table(rows: &[AgreementRow], fields: &[GroupField]) -> Vec<u8> {
    let header = headed(
        fields,
        &["source", "missing_policy", "n", "agree", "excluded", "rate", "wilson_low", "wilson_high", "wald_low", "wald_high", "kappa", "kappa_degenerate"],
    );
    table(
        &header,
        rows.iter().map(|r| {
            let mut cells = r.group.clone();
            cells.extend([
                r.source.as_str().to_string(),
                r.policy.as_str().to_string(),
                r.n.to_string(),
                r.agree.to_string(),
                r.excluded.to_string(),
                opt(r.rate),
                opt(r.wilson.map(|i| i.low)),
                opt(r.wilson.map(|i| i.high)),
                opt(r.wald.map(|i| i.low)),
                opt(r.wald.map(|i| i.high)),
                opt(r.kappa),
                r.kappa_degenerate.to_string(),
            ]);
            cells
        }),
    )
}

pub fn frequency_table(rows: &[FrequencyRow], fields: &[GroupField]) -> Vec<u8> {
    let header = headed(fields, &["segments", "first_n", "delayed_n", "none_n", "first", "delayed", "none"]);
    table(
        &header,
        rows.iter().map(|r| {
            let [f, d, n] = r.proportions();
            let mut cells = r.group.clone();
            cells.extend([
                r.segments.to_string(),
                r.first.to_string(),
                r.delayed.to_string(),
                r.none.to_string(),
                num(f),
                num(d),
                num(n),
            ]);
            cells
        }),
    )
}

pub fn alignment_table(rows: &[AlignmentRow], fields: &[GroupField]) -> Vec<u8> {
    let header = headed(fields, &["consensus_n", "consensus_rate", "single_n", "single_rate", "diff"]);
    table(
        &header,
        rows.iter().map(|r| {
            let mut cells = r.group.clone();
            cells.extend([
                r.consensus_n.to_string(),
                opt(r.consensus_rate),
                r.single_n.to_string(),
                opt(r.single_rate),
                opt(r.diff),
            ]);
            cells
        }),
    )
}

pub fn contrast_table(rows: &[Contrast], alpha: f64) -> Vec<u8> {
    let header = [
        "model_id", "category", "persona_group", "temperature", "unit", "n_pairs", "mean_consensus", "mean_single",
        "mean_diff", "t", "df", "p_value", "p_adjusted", "degenerate", "direction", "significant",
    ];
    table(
        &header,
        rows.iter().map(|c| {
            vec![
                c.model_id.clone(),
                c.category.clone(),
                c.persona_group.to_string(),
                c.temperature.clone(),
                c.unit.as_str().to_string(),
                c.n_pairs.to_string(),
                opt(c.mean_consensus),
                opt(c.mean_single),
                opt(c.mean_diff),
                opt(c.t),
                opt(c.df),
                opt(c.p_value),
                opt(c.p_adjusted),
                c.degenerate.to_string(),
                c.direction.as_str().to_string(),
                c.is_significant(alpha).to_string(),
            ]
        }),
    )
}

/// Every output table as `(file name, bytes)`, computed from in-memory rows.
pub fn analysis_tables(records: &[DecisionRecord], options: &AnalysisOptions) -> Result<Vec<(&'static str, Vec<u8>)>, StatsError> {
    let mut agreement = agreement_rate(records, &AGREEMENT_FIELDS, Source::Consensus, options.policy, options.level)?;
    agreement.extend(agreement_rate(records, &AGREEMENT_FIELDS, Source::Single, options.policy, options.level)?);
    let freq = consensus_frequencies(records, &FREQUENCY_FIELDS)?;
    let align = alignment_diff(records, &AGREEMENT_FIELDS, options.policy)?;
    let family = contrasts(records, options.policy, options.unit)?;
    let (rq1, rq2) = export_model_ready(records);
    Ok(vec![
        ("agreement.csv", agreement_table(&agreement, &AGREEMENT_FIELDS)),
        ("consensus_freq.csv", frequency_table(&freq, &FREQUENCY_FIELDS)),
        ("alignment_diff.csv", alignment_table(&align, &AGREEMENT_FIELDS)),
        ("contrasts.csv", contrast_table(&family, options.alpha)),
        ("rq1_export.csv", rq1),
        ("rq2_export.csv", rq2),
    ])
}

/// Reads a decision table and writes every metric table into `out_dir`.
pub fn analyze(table_path: &Path, out_dir: &Path, options: &AnalysisOptions) -> Result<AnalysisSummary, AnalysisError> {
    let records = read_decision_table(table_path)?;
    let family = contrasts(&records, options.policy, options.unit)?;
    let mut files = Vec::new();
    for (name, bytes) in analysis_tables(&records, options)? {
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        files.push(path);
    }
    let significant = significant_contrasts(&family, options.alpha);
    Ok(AnalysisSummary {
        decisions: records.len(),
        contrasts: family.len(),
        tested: family.iter().filter(|c| c.p_value.is_some()).count(),
        mas_better: significant.iter().filter(|c| c.direction == Direction::MasBetter).count(),
        single_better: significant.iter().filter(|c| c.direction == Direction::SingleBetter).count(),
        files,
    })
}
