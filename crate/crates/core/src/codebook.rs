//! Codebook, transcript segments, ground-truth labels and the ternary
//! code-assignment value shared by every other module.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::extraction::normalize_label;

/// Sentinel path that selects the bundled eight-category codebook.
pub const BUILTIN_CODEBOOK: &str = "builtin";

const BUILTIN_CODEBOOK_TOML: &str = include_str!("resources/codebook.toml");

pub const TRANSCRIPT_HEADER: [&str; 4] = ["segment_id", "transcript_id", "speaker", "text"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("codebook: {0}")]
    Codebook(String),
    #[error("{path}: {message}")]
    Transcript { path: PathBuf, message: String },
    #[error("{path}: row {row}: {message}")]
    Row {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    GroundTruth { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeCategory {
    pub name: String,
    pub definition: String,
    #[serde(default)]
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    version: String,
    categories: Vec<CodeCategory>,
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    version: String,
    #[serde(rename = "category", default)]
    categories: Vec<CodeCategory>,
}

impl Codebook {
    /// Validates names (non-empty, unique after label normalization) and
    /// requires at least one category.
    pub fn new(version: impl Into<String>, categories: Vec<CodeCategory>) -> Result<Self, DataError> {
        if categories.is_empty() {
            return Err(DataError::Codebook("at least one category is required".into()));
        }
        let mut seen = HashSet::new();
        for (idx, category) in categories.iter().enumerate() {
            if category.name.trim().is_empty() {
                return Err(DataError::Codebook(format!(
                    "category[{idx}].name must not be empty"
                )));
            }
            if !seen.insert(normalize_label(&category.name)) {
                return Err(DataError::Codebook(format!(
                    "duplicate category name {:?} at category[{idx}]",
                    category.name
                )));
            }
        }
        Ok(Self {
            version: version.into(),
            categories,
        })
    }

    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_CODEBOOK_TOML, Path::new(BUILTIN_CODEBOOK))
            .expect("bundled codebook is valid")
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, DataError> {
        let file: CodebookFile = toml::from_str(text).map_err(|e| DataError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::new(file.version, file.categories)
    }

    pub fn to_toml_string(&self) -> String {
        let file = CodebookFile {
            version: self.version.clone(),
            categories: self.categories.clone(),
        };
        toml::to_string(&file).expect("codebook serializes")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn categories(&self) -> &[CodeCategory] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.name.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    /// Codebook text as handed to agents in the user prompt.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for category in &self.categories {
            out.push_str(&format!("- {}: {}\n", category.name, category.definition));
            if !category.examples.is_empty() {
                let quoted: Vec<String> = category
                    .examples
                    .iter()
                    .map(|e| format!("\"{e}\""))
                    .collect();
                out.push_str(&format!("  Examples: {}\n", quoted.join("; ")));
            }
        }
        out
    }
}

/// Loads a codebook document, or the bundled default for [`BUILTIN_CODEBOOK`].
pub fn load_codebook(path: &Path) -> Result<Codebook, DataError> {
    if path.as_os_str() == BUILTIN_CODEBOOK {
        return Ok(Codebook::builtin());
    }
    let text = read(path)?;
    Codebook::from_toml_str(&text, path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    pub transcript_id: String,
    pub speaker: Option<String>,
    pub text: String,
}

impl Segment {
    /// `Speaker: text` when a speaker is known, bare text otherwise.
    pub fn display(&self) -> String {
        match &self.speaker {
            Some(s) => format!("{s}: {}", self.text),
            None => self.text.clone(),
        }
    }
}

/// Splits a leading `Speaker: ` prefix off an utterance. A prefix counts as a
/// speaker tag when it is at most three words, starts with an uppercase
/// letter and is followed by non-empty text.
pub fn split_speaker(raw: &str) -> (Option<String>, String) {
    let trimmed = raw.trim();
    if let Some((head, tail)) = trimmed.split_once(": ") {
        let head = head.trim();
        let tail = tail.trim();
        let starts_upper = head.chars().next().is_some_and(|c| c.is_uppercase());
        let words = head.split_whitespace().count();
        if starts_upper && (1..=3).contains(&words) && head.len() <= 40 && !tail.is_empty() {
            return (Some(head.to_string()), tail.to_string());
        }
    }
    (None, trimmed.to_string())
}

pub fn load_transcript(path: &Path) -> Result<Vec<Segment>, DataError> {
    let text = read(path)?;
    parse_transcript(&text, path)
}

pub fn parse_transcript(text: &str, origin: &Path) -> Result<Vec<Segment>, DataError> {
    let err = |message: String| DataError::Transcript {
        path: origin.to_path_buf(),
        message,
    };
    if text.trim().is_empty() {
        return Err(err("transcript file is empty".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| err(format!("unreadable header: {e}")))?
        .clone();
    let header: Vec<&str> = header.iter().map(str::trim).collect();
    if header != TRANSCRIPT_HEADER {
        return Err(err(format!(
            "expected header {:?}, found {:?}",
            TRANSCRIPT_HEADER.join(","),
            header.join(",")
        )));
    }

    let mut segments = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| DataError::Row {
            path: origin.to_path_buf(),
            row,
            message: e.to_string(),
        })?;
        let row_err = |message: String| DataError::Row {
            path: origin.to_path_buf(),
            row,
            message,
        };
        let id_cell = record.get(0).unwrap_or("").trim();
        if !id_cell.is_empty() {
            let parsed: usize = id_cell
                .parse()
                .map_err(|_| row_err(format!("segment_id {id_cell:?} is not a non-negative integer")))?;
            if parsed != idx {
                return Err(row_err(format!(
                    "segment_id {parsed} out of sequence (expected {idx})"
                )));
            }
        }
        let transcript_id = record.get(1).unwrap_or("").trim().to_string();
        let speaker_cell = record.get(2).unwrap_or("").trim();
        let raw_text = record.get(3).unwrap_or("");
        let (speaker, text) = if speaker_cell.is_empty() {
            split_speaker(raw_text)
        } else {
            (Some(speaker_cell.to_string()), raw_text.trim().to_string())
        };
        if text.is_empty() {
            return Err(row_err("text is empty".into()));
        }
        segments.push(Segment {
            id: idx,
            transcript_id,
            speaker,
            text,
        });
    }
    if segments.is_empty() {
        return Err(err("transcript has no segments".into()));
    }
    Ok(segments)
}

pub fn write_transcript(segments: &[Segment]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(TRANSCRIPT_HEADER).expect("in-memory write");
    for s in segments {
        writer
            .write_record([
                s.id.to_string().as_str(),
                &s.transcript_id,
                s.speaker.as_deref().unwrap_or(""),
                &s.text,
            ])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("flush")).expect("utf8")
}

/// Ternary decision for one category on one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CodeValue {
    Present,
    Absent,
    Missing,
}

impl CodeValue {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            CodeValue::Present
        } else {
            CodeValue::Absent
        }
    }

    pub fn as_bit(self) -> Option<bool> {
        match self {
            CodeValue::Present => Some(true),
            CodeValue::Absent => Some(false),
            CodeValue::Missing => None,
        }
    }

    pub fn is_missing(self) -> bool {
        self == CodeValue::Missing
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CodeValue::Present => "1",
            CodeValue::Absent => "0",
            CodeValue::Missing => "missing",
        }
    }

    pub fn parse(cell: &str) -> Option<Self> {
        match cell.trim() {
            "1" => Some(CodeValue::Present),
            "0" => Some(CodeValue::Absent),
            "missing" => Some(CodeValue::Missing),
            _ => None,
        }
    }
}

impl fmt::Display for CodeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for CodeValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            CodeValue::Present => serializer.serialize_u8(1),
            CodeValue::Absent => serializer.serialize_u8(0),
            CodeValue::Missing => serializer.serialize_str("missing"),
        }
    }
}

impl<'de> Deserialize<'de> for CodeValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u8),
            Str(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(1) => Ok(CodeValue::Present),
            Raw::Int(0) => Ok(CodeValue::Absent),
            Raw::Str(s) if s == "missing" => Ok(CodeValue::Missing),
            _ => Err(serde::de::Error::custom("expected 0, 1 or \"missing\"")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentSource {
    Human,
    Agent,
    Consensus,
    SingleAgent,
}

/// Per-category decisions for one segment, keyed and ordered by the codebook.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeAssignment {
    pub values: IndexMap<String, CodeValue>,
    pub source: AssignmentSource,
}

impl CodeAssignment {
    pub fn filled(codebook: &Codebook, value: CodeValue, source: AssignmentSource) -> Self {
        Self {
            values: codebook.names().map(|n| (n.to_string(), value)).collect(),
            source,
        }
    }

    pub fn all_missing(codebook: &Codebook, source: AssignmentSource) -> Self {
        Self::filled(codebook, CodeValue::Missing, source)
    }

    /// Builds an assignment from bits given in codebook order.
    pub fn from_bits(codebook: &Codebook, bits: &[bool], source: AssignmentSource) -> Self {
        assert_eq!(bits.len(), codebook.len(), "one bit per category");
        Self {
            values: codebook
                .names()
                .zip(bits)
                .map(|(n, b)| (n.to_string(), CodeValue::from_bit(*b)))
                .collect(),
            source,
        }
    }

    pub fn get(&self, category: &str) -> Option<CodeValue> {
        self.values.get(category).copied()
    }

    pub fn set(&mut self, category: &str, value: CodeValue) {
        if let Some(slot) = self.values.get_mut(category) {
            *slot = value;
        }
    }

    pub fn with_source(mut self, source: AssignmentSource) -> Self {
        self.source = source;
        self
    }

    /// True when the keys are exactly the codebook categories in codebook order.
    pub fn conforms_to(&self, codebook: &Codebook) -> bool {
        self.values.len() == codebook.len()
            && self.values.keys().map(String::as_str).eq(codebook.names())
    }

    pub fn missing_count(&self) -> usize {
        self.values.values().filter(|v| v.is_missing()).count()
    }

    /// Python-style dictionary text, as agents are asked to emit it.
    pub fn to_dict_string(&self) -> String {
        let body: Vec<String> = self
            .values
            .iter()
            .map(|(k, v)| match v {
                CodeValue::Missing => format!("'{k}': 'missing'"),
                _ => format!("'{k}': {}", v.as_str()),
            })
            .collect();
        format!("{{{}}}", body.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub segment_id: usize,
    pub assignment: CodeAssignment,
}

pub fn load_ground_truth(
    path: &Path,
    codebook: &Codebook,
    segments: &[Segment],
) -> Result<Vec<GroundTruth>, DataError> {
    let text = read(path)?;
    parse_ground_truth(&text, path, codebook, segments)
}

pub fn parse_ground_truth(
    text: &str,
    origin: &Path,
    codebook: &Codebook,
    segments: &[Segment],
) -> Result<Vec<GroundTruth>, DataError> {
    let err = |message: String| DataError::GroundTruth {
        path: origin.to_path_buf(),
        message,
    };
    if text.trim().is_empty() {
        return Err(err("ground-truth file is empty".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| err(format!("unreadable header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some("segment_id") {
        return Err(err("first column must be segment_id".into()));
    }
    let known: BTreeSet<&str> = codebook.names().collect();
    let unknown: Vec<&str> = header[1..]
        .iter()
        .map(String::as_str)
        .filter(|h| !known.contains(h))
        .collect();
    if !unknown.is_empty() {
        return Err(err(format!("unknown column(s): {}", unknown.join(", "))));
    }
    // column index for each category, in codebook order
    let mut columns = Vec::with_capacity(codebook.len());
    for name in codebook.names() {
        let matches: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.as_str() == name)
            .map(|(i, _)| i)
            .collect();
        match matches.as_slice() {
            [i] => columns.push(*i),
            [] => return Err(err(format!("missing column for category {name:?}"))),
            _ => return Err(err(format!("duplicate column for category {name:?}"))),
        }
    }

    let segment_ids: BTreeSet<usize> = segments.iter().map(|s| s.id).collect();
    let mut rows: BTreeMap<usize, GroundTruth> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let row_err = |message: String| DataError::Row {
            path: origin.to_path_buf(),
            row,
            message,
        };
        let record = record.map_err(|e| row_err(e.to_string()))?;
        let id_cell = record.get(0).unwrap_or("").trim();
        let segment_id: usize = id_cell
            .parse()
            .map_err(|_| row_err(format!("segment_id {id_cell:?} is not an integer")))?;
        if !segment_ids.contains(&segment_id) {
            return Err(row_err(format!("segment {segment_id} does not exist in transcript")));
        }
        let mut values = IndexMap::with_capacity(codebook.len());
        for (name, &col) in codebook.names().zip(&columns) {
            let cell = record.get(col).unwrap_or("").trim();
            let value = match cell {
                "1" => CodeValue::Present,
                "0" => CodeValue::Absent,
                other => {
                    return Err(row_err(format!(
                        "column {name:?}: value {other:?} is not binary (0 or 1)"
                    )))
                }
            };
            values.insert(name.to_string(), value);
        }
        let gt = GroundTruth {
            segment_id,
            assignment: CodeAssignment {
                values,
                source: AssignmentSource::Human,
            },
        };
        if rows.insert(segment_id, gt).is_some() {
            return Err(row_err(format!("duplicate row for segment {segment_id}")));
        }
    }
    let missing: Vec<String> = segment_ids
        .iter()
        .filter(|id| !rows.contains_key(id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(err(format!(
            "no ground-truth row for segment(s): {}",
            missing.join(", ")
        )));
    }
    Ok(rows.into_values().collect())
}

pub fn write_ground_truth(codebook: &Codebook, rows: &[GroundTruth]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["segment_id".to_string()];
    header.extend(codebook.names().map(str::to_string));
    writer.write_record(&header).expect("in-memory write");
    for gt in rows {
        let mut record = vec![gt.segment_id.to_string()];
        for name in codebook.names() {
            record.push(gt.assignment.get(name).unwrap_or(CodeValue::Missing).to_string());
        }
        writer.write_record(&record).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("flush")).expect("utf8")
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("fixture")
    }

    #[test]
    fn builtin_has_eight_categories_in_order() {
        let cb = load_codebook(Path::new(BUILTIN_CODEBOOK)).unwrap();
        assert_eq!(cb.len(), 8);
        assert_eq!(cb.categories()[0].name, "Greeting");
        assert_eq!(cb.categories()[7].name, "Time Management");
    }

    #[test]
    fn single_category_codebook() {
        let cb = Codebook::from_toml_str(
            "version = \"t\"\n[[category]]\nname = \"A\"\ndefinition = \"a\"\n",
            p(),
        )
        .unwrap();
        assert_eq!(cb.names().collect::<Vec<_>>(), vec!["A"]);
    }

    #[test]
    fn duplicate_category_rejected() {
        let text = "version = \"t\"\n[[category]]\nname = \"A\"\ndefinition = \"a\"\n\
                    [[category]]\nname = \"A\"\ndefinition = \"b\"\n";
        let err = Codebook::from_toml_str(text, p()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn codebook_parse_error_names_location() {
        let err = Codebook::from_toml_str("version = \n", p()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = Codebook::from_toml_str("[[category]]\nname = \"A\"\n", p()).unwrap_err();
        assert!(err.to_string().contains("version") || err.to_string().contains("definition"));
    }

    #[test]
    fn transcript_assigns_ordinals_and_splits_speaker() {
        let text = "segment_id,transcript_id,speaker,text\n\
                    0,t1,,\"Tutor: What's good, XX?\"\n\
                    1,t1,Student,hi\n\
                    ,t1,,no prefix here\n";
        let segs = parse_transcript(text, p()).unwrap();
        assert_eq!(segs.iter().map(|s| s.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(segs[0].speaker.as_deref(), Some("Tutor"));
        assert_eq!(segs[0].text, "What's good, XX?");
        assert_eq!(segs[1].speaker.as_deref(), Some("Student"));
        assert_eq!(segs[2].speaker, None);
    }

    #[test]
    fn transcript_blank_text_cites_row() {
        let text = "segment_id,transcript_id,speaker,text\n0,t,,hello\n1,t,,\n";
        let err = parse_transcript(text, p()).unwrap_err();
        assert!(matches!(err, DataError::Row { row: 2, .. }), "{err}");
    }

    #[test]
    fn transcript_empty_file_rejected() {
        assert!(parse_transcript("", p()).is_err());
        assert!(parse_transcript("segment_id,transcript_id,speaker,text\n", p()).is_err());
    }

    fn two_cat() -> Codebook {
        Codebook::new(
            "t",
            vec![
                CodeCategory {
                    name: "Greeting".into(),
                    definition: "g".into(),
                    examples: vec![],
                },
                CodeCategory {
                    name: "Instruction".into(),
                    definition: "i".into(),
                    examples: vec![],
                },
            ],
        )
        .unwrap()
    }

    fn segs(n: usize) -> Vec<Segment> {
        (0..n)
            .map(|id| Segment {
                id,
                transcript_id: "t".into(),
                speaker: None,
                text: format!("line {id}"),
            })
            .collect()
    }

    #[test]
    fn ground_truth_loads_binary_rows() {
        let cb = Codebook::builtin();
        let mut header = vec!["segment_id".to_string()];
        header.extend(cb.names().map(str::to_string));
        let text = format!(
            "{}\n0,1,0,0,0,0,0,0,0\n1,0,0,0,0,0,0,0,0\n",
            header
                .iter()
                .map(|h| format!("\"{h}\""))
                .collect::<Vec<_>>()
                .join(",")
        );
        let gt = parse_ground_truth(&text, p(), &cb, &segs(2)).unwrap();
        assert_eq!(gt[0].assignment.get("Greeting"), Some(CodeValue::Present));
        assert_eq!(gt[0].assignment.get("Instruction"), Some(CodeValue::Absent));
        assert!(gt[1].assignment.values.values().all(|v| *v == CodeValue::Absent));
        assert!(gt[0].assignment.conforms_to(&cb));
    }

    #[test]
    fn ground_truth_errors() {
        let cb = two_cat();
        let bad_cell = "segment_id,Greeting,Instruction\n0,2,0\n";
        assert!(parse_ground_truth(bad_cell, p(), &cb, &segs(1))
            .unwrap_err()
            .to_string()
            .contains("not binary"));
        let missing_row = "segment_id,Greeting,Instruction\n0,1,0\n";
        let err = parse_ground_truth(missing_row, p(), &cb, &segs(2)).unwrap_err();
        assert!(err.to_string().contains("segment(s): 1"), "{err}");
        let unknown = "segment_id,Greeting,Instruction,Praise,Other\n0,1,0,0,0\n";
        let err = parse_ground_truth(unknown, p(), &cb, &segs(1)).unwrap_err();
        assert!(err.to_string().contains("Praise, Other"), "{err}");
        let no_segment = "segment_id,Greeting,Instruction\n0,1,0\n5,0,0\n";
        assert!(parse_ground_truth(no_segment, p(), &cb, &segs(1)).is_err());
        let reordered = "segment_id,Instruction,Greeting\n0,1,0\n";
        let gt = parse_ground_truth(reordered, p(), &cb, &segs(1)).unwrap();
        assert_eq!(
            gt[0].assignment.values.keys().collect::<Vec<_>>(),
            vec!["Greeting", "Instruction"]
        );
        assert_eq!(gt[0].assignment.get("Instruction"), Some(CodeValue::Present));
    }

    #[test]
    fn codebook_round_trip_builtin() {
        let cb = Codebook::builtin();
        let again = Codebook::from_toml_str(&cb.to_toml_string(), p()).unwrap();
        assert_eq!(cb, again);
    }

    fn arb_codebook() -> impl Strategy<Value = Codebook> {
        prop::collection::btree_set("[A-Z][a-z]{2,8}( [A-Z][a-z]{1,6})?", 1..10).prop_map(|names| {
            let cats = names
                .into_iter()
                .map(|name| CodeCategory {
                    definition: format!("about {name}"),
                    examples: vec![format!("e.g. {name}")],
                    name,
                })
                .collect();
            Codebook::new("p", cats).unwrap()
        })
    }

    proptest! {
        #[test]
        fn assignment_order_follows_codebook(cb in arb_codebook(), seed in any::<u64>()) {
            let bits: Vec<bool> = (0..cb.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let a = CodeAssignment::from_bits(&cb, &bits, AssignmentSource::Agent);
            prop_assert!(a.conforms_to(&cb));
            let rows = vec![GroundTruth { segment_id: 0, assignment: a.with_source(AssignmentSource::Human) }];
            let text = write_ground_truth(&cb, &rows);
            let header: Vec<String> = text.lines().next().unwrap().split(',').map(|s| s.trim_matches('"').to_string()).collect();
            let expected: Vec<String> = std::iter::once("segment_id".to_string()).chain(cb.names().map(str::to_string)).collect();
            prop_assert_eq!(header, expected);
            let back = parse_ground_truth(&text, p(), &cb, &segs(1)).unwrap();
            prop_assert_eq!(back, rows);
            let cb2 = Codebook::from_toml_str(&cb.to_toml_string(), p()).unwrap();
            prop_assert_eq!(cb2, cb);
        }

        #[test]
        fn ground_truth_rejects_non_binary(cell in "[^01,\"\n\r]{1,4}|[2-9]|-1|0\\.5|11", col in 0usize..2, row in 0usize..3) {
            prop_assume!(cell.trim() != "0" && cell.trim() != "1");
            let cb = two_cat();
            let mut lines = vec!["segment_id,Greeting,Instruction".to_string()];
            for r in 0..3 {
                let mut cells = ["0".to_string(), "1".to_string()];
                if r == row { cells[col] = cell.clone(); }
                lines.push(format!("{r},{},{}", cells[0], cells[1]));
            }
            let text = lines.join("\n");
            let err = parse_ground_truth(&text, p(), &cb, &segs(3));
            prop_assert!(err.is_err());
        }

        #[test]
        fn transcript_round_trip(texts in prop::collection::vec("[A-Za-z][A-Za-z ,.?'\"]{0,30}", 1..8)) {
            let body: Vec<String> = texts.iter().enumerate().map(|(i, t)| format!("{i},tx,,\"{}\"", t.replace('"', "\"\""))).collect();
            let text = format!("segment_id,transcript_id,speaker,text\n{}\n", body.join("\n"));
            let segs = parse_transcript(&text, p()).unwrap();
            let again = parse_transcript(&write_transcript(&segs), p()).unwrap();
            prop_assert_eq!(segs, again);
        }
    }
}
