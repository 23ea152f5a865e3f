//! Recovers the code dictionary from free-form completion text.
//!
//! The last `{ ... }` region in a completion is taken as the agent's decision.
//! Keys are normalized and mapped onto codebook categories through an alias
//! table; anything that cannot be mapped is reported, never dropped.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{AssignmentSource, CodeAssignment, CodeValue, Codebook};

const DEFAULT_ALIASES_TOML: &str = include_str!("resources/aliases.toml");

/// Case-folds, trims, collapses internal whitespace and strips trailing
/// `.<digits>` duplicate markers (`"Guiding Feedback.1"` -> `"guiding feedback"`).
pub fn normalize_label(raw: &str) -> String {
    let mut label = raw
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    loop {
        let stripped = strip_numeric_suffix(&label).trim_end();
        if stripped.len() == label.len() {
            return label;
        }
        label = stripped.to_string();
    }
}

fn strip_numeric_suffix(label: &str) -> &str {
    let digits = label.len() - label.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return label;
    }
    let head = &label[..label.len() - digits];
    match head.strip_suffix('.') {
        Some(rest) if !rest.is_empty() => rest,
        _ => label,
    }
}

#[derive(Debug, Error)]
pub enum AliasError {
    #[error("{path}: {message}")]
    Load { path: String, message: String },
}

/// Normalized alias -> canonical category name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AliasTable {
    entries: HashMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct AliasFile {
    #[serde(default)]
    aliases: std::collections::BTreeMap<String, String>,
}

impl AliasTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Variants observed in model output for the bundled codebook.
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_ALIASES_TOML).expect("bundled alias table is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        let file: AliasFile = toml::from_str(text)?;
        let mut table = Self::empty();
        for (alias, target) in file.aliases {
            table.insert(&alias, &target);
        }
        Ok(table)
    }

    /// Built-in aliases overlaid with the entries of a user file.
    pub fn load_overlay(path: &Path) -> Result<Self, AliasError> {
        let text = fs::read_to_string(path).map_err(|e| AliasError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let user = Self::from_toml_str(&text).map_err(|e| AliasError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut table = Self::builtin();
        table.entries.extend(user.entries);
        Ok(table)
    }

    pub fn insert(&mut self, alias: &str, category: &str) {
        self.entries.insert(normalize_label(alias), category.to_string());
    }

    pub fn lookup(&self, normalized: &str) -> Option<&str> {
        self.entries.get(normalized).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    Partial,
    Failed,
}

impl ParseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Partial => "partial",
            Self::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub assignment: CodeAssignment,
    /// Categories whose value is `Missing`, in codebook order.
    pub missing_labels: Vec<String>,
    /// Raw keys that did not map onto any category.
    pub extraneous_labels: Vec<String>,
    /// Categories present with a value other than 0 or 1.
    pub malformed_labels: Vec<String>,
    /// Categories that appeared more than once in the dictionary.
    pub duplicate_labels: Vec<String>,
    /// Subset of `duplicate_labels` whose occurrences disagreed.
    pub conflicting_labels: Vec<String>,
    pub parse_status: ParseStatus,
    pub retried: bool,
}

impl ExtractionResult {
    pub fn is_complete(&self) -> bool {
        self.missing_labels.is_empty()
    }
}

/// Last-wins merge of normalized `(key, value)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedPairs<V> {
    pub values: IndexMap<String, V>,
    pub duplicates: Vec<String>,
    pub conflicts: Vec<String>,
}

pub fn merge_duplicates<V: PartialEq + Clone>(pairs: &[(String, V)]) -> MergedPairs<V> {
    let mut values: IndexMap<String, V> = IndexMap::new();
    let mut duplicates = Vec::new();
    let mut conflicts = Vec::new();
    for (key, value) in pairs {
        if let Some(previous) = values.insert(key.clone(), value.clone()) {
            if !duplicates.contains(key) {
                duplicates.push(key.clone());
            }
            if previous != *value && !conflicts.contains(key) {
                conflicts.push(key.clone());
            }
        }
    }
    MergedPairs {
        values,
        duplicates,
        conflicts,
    }
}

/// Returns the text between the last `}` and the closest `{` before it.
pub fn last_brace_region(raw: &str) -> Option<&str> {
    let close = raw.rfind('}')?;
    let open = raw[..close].rfind('{')?;
    Some(&raw[open + 1..close])
}

fn unquote(s: &str) -> &str {
    s.trim()
        .trim_matches(|c| matches!(c, '\'' | '"' | '`' | '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}'))
        .trim()
}

/// Maps completion text onto a codebook using an alias table.
#[derive(Debug, Clone)]
pub struct Extractor {
    codebook: Codebook,
    aliases: AliasTable,
    by_normalized: HashMap<String, String>,
}

impl Extractor {
    pub fn new(codebook: &Codebook, aliases: &AliasTable) -> Self {
        let by_normalized = codebook
            .names()
            .map(|n| (normalize_label(n), n.to_string()))
            .collect();
        Self {
            codebook: codebook.clone(),
            aliases: aliases.clone(),
            by_normalized,
        }
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn resolve(&self, raw_key: &str) -> Option<&str> {
        let normalized = normalize_label(raw_key);
        if let Some(name) = self.by_normalized.get(&normalized) {
            return Some(name);
        }
        let target = self.aliases.lookup(&normalized)?;
        // alias targets must name a category of this codebook
        self.by_normalized
            .get(&normalize_label(target))
            .map(String::as_str)
    }

    pub fn extract(&self, raw: &str) -> ExtractionResult {
        let Some(region) = last_brace_region(raw) else {
            return self.failed();
        };

        let mut pairs: Vec<(String, CodeValue)> = Vec::new();
        let mut extraneous = Vec::new();
        let mut parsed_items = 0usize;
        for item in region.split(',') {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let Some((key, value)) = item.rsplit_once(':') else {
                extraneous.push(item.to_string());
                continue;
            };
            parsed_items += 1;
            let key = unquote(key);
            let value = match unquote(value) {
                "1" => CodeValue::Present,
                "0" => CodeValue::Absent,
                _ => CodeValue::Missing,
            };
            match self.resolve(key) {
                Some(category) => pairs.push((category.to_string(), value)),
                None => extraneous.push(key.to_string()),
            }
        }
        if parsed_items == 0 {
            let mut failed = self.failed();
            failed.extraneous_labels = extraneous;
            return failed;
        }

        let merged = merge_duplicates(&pairs);
        let mut assignment = CodeAssignment::all_missing(&self.codebook, AssignmentSource::Agent);
        let mut missing = Vec::new();
        let mut malformed = Vec::new();
        for name in self.codebook.names() {
            match merged.values.get(name) {
                Some(CodeValue::Missing) => {
                    malformed.push(name.to_string());
                    missing.push(name.to_string());
                }
                Some(value) => assignment.set(name, *value),
                None => missing.push(name.to_string()),
            }
        }
        let clean = missing.is_empty() && extraneous.is_empty() && malformed.is_empty();
        ExtractionResult {
            assignment,
            missing_labels: missing,
            extraneous_labels: extraneous,
            malformed_labels: malformed,
            duplicate_labels: merged.duplicates,
            conflicting_labels: merged.conflicts,
            parse_status: if clean {
                ParseStatus::Clean
            } else {
                ParseStatus::Partial
            },
            retried: false,
        }
    }

    fn failed(&self) -> ExtractionResult {
        ExtractionResult {
            assignment: CodeAssignment::all_missing(&self.codebook, AssignmentSource::Agent),
            missing_labels: self.codebook.names().map(str::to_string).collect(),
            extraneous_labels: Vec::new(),
            malformed_labels: Vec::new(),
            duplicate_labels: Vec::new(),
            conflicting_labels: Vec::new(),
            parse_status: ParseStatus::Failed,
            retried: false,
        }
    }

    /// Extracts `raw`; if any label is missing, calls `reprompt` exactly once
    /// and uses the re-extracted result, whose remaining gaps stay `Missing`.
    /// Returns the retry's raw text when a retry happened.
    pub fn extract_with_retry<E>(
        &self,
        raw: &str,
        reprompt: impl FnOnce() -> Result<String, E>,
    ) -> Result<(ExtractionResult, Option<String>), RetryError<E>> {
        let first = self.extract(raw);
        if first.is_complete() {
            return Ok((first, None));
        }
        match reprompt() {
            Ok(second_raw) => {
                let mut second = self.extract(&second_raw);
                second.retried = true;
                Ok((second, Some(second_raw)))
            }
            Err(source) => Err(RetryError {
                first_pass: Box::new(first),
                source,
            }),
        }
    }
}

/// Transport failure during the single re-prompt, with the first-pass result.
#[derive(Debug, Error)]
#[error("re-prompt failed: {source}")]
pub struct RetryError<E> {
    pub first_pass: Box<ExtractionResult>,
    #[source]
    pub source: E,
}

/// Extraction against `codebook` with the built-in alias table.
pub fn extract_codes(raw: &str, codebook: &Codebook) -> ExtractionResult {
    Extractor::new(codebook, &AliasTable::builtin()).extract(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::cell::Cell;

    fn full_dict() -> &'static str {
        "Code: {'Greeting': 1, 'Instruction': 0, 'Guiding Feedback': 0, \
         'Aligning to Prior Knowledge': 0, 'Understanding/Engagement-Tutor': 0, \
         'Technical or Logistics': 0, 'Encouragement': 0, 'Time Management': 0}"
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_label("  Guiding   Feedback.1 "), "guiding feedback");
        assert_eq!(normalize_label("Guiding Feedback.2"), "guiding feedback");
        assert_eq!(normalize_label("Encouragement "), "encouragement");
        assert_eq!(normalize_label("a.1.2"), "a");
        assert_eq!(normalize_label("v2"), "v2");
        assert_eq!(normalize_label(".5"), ".5");
    }

    #[test]
    fn clean_full_dictionary() {
        let r = extract_codes(full_dict(), &Codebook::builtin());
        assert_eq!(r.parse_status, ParseStatus::Clean);
        assert_eq!(r.assignment.get("Greeting"), Some(CodeValue::Present));
        assert_eq!(r.assignment.get("Time Management"), Some(CodeValue::Absent));
        assert!(r.missing_labels.is_empty());
    }

    #[test]
    fn duplicate_marker_keys_collapse() {
        let raw = "{'Greeting': 0, 'Guiding feedback': 1, 'Guiding Feedback.1': 1}";
        let r = extract_codes(raw, &Codebook::builtin());
        assert_eq!(r.parse_status, ParseStatus::Partial);
        assert_eq!(r.assignment.get("Guiding Feedback"), Some(CodeValue::Present));
        assert_eq!(r.missing_labels.len(), 6);
        assert_eq!(r.duplicate_labels, vec!["Guiding Feedback"]);
        assert!(r.conflicting_labels.is_empty());
        assert!(r.extraneous_labels.is_empty());
    }

    #[test]
    fn no_braces_fails() {
        let r = extract_codes("no braces here", &Codebook::builtin());
        assert_eq!(r.parse_status, ParseStatus::Failed);
        assert_eq!(r.assignment.missing_count(), 8);
        assert_eq!(r.missing_labels.len(), 8);
    }

    #[test]
    fn last_region_wins_and_tolerates_quotes() {
        let raw = "Per the codebook {'Greeting': 0, 'Instruction': 1, ...}. My answer: \
                   {\"Greeting\": 1, \"Instruction\": \"0\", \"Guiding Feedback\": 0, \
                   \"Aligning to prior knowledge\": 0, \"Tutor questioning\": 1, \
                   \"Technical or Logistics\": 0, \"Encouragement\": 0, \"Time Management\": 0,}";
        let r = extract_codes(raw, &Codebook::builtin());
        assert_eq!(r.parse_status, ParseStatus::Clean, "{r:?}");
        assert_eq!(r.assignment.get("Greeting"), Some(CodeValue::Present));
        assert_eq!(
            r.assignment.get("Understanding/Engagement-Tutor"),
            Some(CodeValue::Present)
        );
    }

    #[test]
    fn non_binary_values_are_missing() {
        let raw = full_dict().replace("'Greeting': 1", "'Greeting': 'yes'");
        let r = extract_codes(&raw, &Codebook::builtin());
        assert_eq!(r.assignment.get("Greeting"), Some(CodeValue::Missing));
        assert_eq!(r.malformed_labels, vec!["Greeting"]);
        assert_eq!(r.missing_labels, vec!["Greeting"]);
        assert_eq!(r.parse_status, ParseStatus::Partial);
    }

    #[test]
    fn invented_categories_are_extraneous() {
        let raw = full_dict().replace('}', ", 'Student responses': 0}");
        let r = extract_codes(&raw, &Codebook::builtin());
        assert_eq!(r.extraneous_labels, vec!["Student responses"]);
        assert_eq!(r.parse_status, ParseStatus::Partial);
        assert!(r.missing_labels.is_empty());
    }

    #[test]
    fn merge_rules() {
        let m = merge_duplicates(&[("G".to_string(), 1), ("G".to_string(), 1)]);
        assert_eq!(m.values.len(), 1);
        assert!(m.conflicts.is_empty());
        let m = merge_duplicates(&[("G".to_string(), 0), ("G".to_string(), 1)]);
        assert_eq!(m.values["G"], 1);
        assert_eq!(m.conflicts, vec!["G"]);
        let m = merge_duplicates(&[("G".to_string(), 1), ("H".to_string(), 0)]);
        assert_eq!(m.values.len(), 2);
        assert!(m.duplicates.is_empty());
    }

    #[test]
    fn retry_policy() {
        let cb = Codebook::builtin();
        let ex = Extractor::new(&cb, &AliasTable::builtin());
        let calls = Cell::new(0);
        let (r, again) = ex
            .extract_with_retry(full_dict(), || -> Result<String, ()> {
                calls.set(calls.get() + 1);
                Ok(String::new())
            })
            .unwrap();
        assert_eq!(calls.get(), 0);
        assert!(!r.retried && again.is_none());

        let (r, again) = ex
            .extract_with_retry("garbage", || -> Result<String, ()> { Ok(full_dict().to_string()) })
            .unwrap();
        assert!(r.retried);
        assert_eq!(r.parse_status, ParseStatus::Clean);
        assert_eq!(again.as_deref(), Some(full_dict()));

        let (r, _) = ex
            .extract_with_retry("garbage", || -> Result<String, ()> { Ok("still garbage".into()) })
            .unwrap();
        assert!(r.retried);
        assert_eq!(r.assignment.missing_count(), 8);

        let err = ex
            .extract_with_retry("{'Greeting': 1}", || -> Result<String, &str> { Err("down") })
            .unwrap_err();
        assert_eq!(err.first_pass.missing_labels.len(), 7);
    }

    #[test]
    fn user_alias_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aliases.toml");
        std::fs::write(&path, "[aliases]\n\"praise\" = \"Encouragement\"\n").unwrap();
        let table = AliasTable::load_overlay(&path).unwrap();
        assert_eq!(table.lookup("praise"), Some("Encouragement"));
        assert_eq!(table.lookup("tutor questioning"), Some("Understanding/Engagement-Tutor"));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_label(&s);
            prop_assert_eq!(normalize_label(&once), once);
        }

        #[test]
        fn normalization_idempotent_on_suffix_heavy(s in "[a-zA-Z .0-9]{0,24}") {
            let once = normalize_label(&s);
            prop_assert_eq!(normalize_label(&once), once);
        }

        #[test]
        fn extraction_is_total(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let raw = String::from_utf8_lossy(&bytes);
            let cb = Codebook::builtin();
            let r = extract_codes(&raw, &cb);
            prop_assert!(r.assignment.conforms_to(&cb));
            let clean = r.missing_labels.is_empty() && r.extraneous_labels.is_empty() && r.malformed_labels.is_empty();
            prop_assert_eq!(clean, r.parse_status == ParseStatus::Clean);
            for name in cb.names() {
                let missing = r.assignment.get(name) == Some(CodeValue::Missing);
                prop_assert_eq!(missing, r.missing_labels.iter().any(|m| m == name));
            }
        }
    }
}
