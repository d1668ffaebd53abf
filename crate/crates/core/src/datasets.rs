//! Line-delimited JSON loaders for the four benchmarks and the name
//! heuristic used by `[NAME]` prefixes.
//!
//! Expected fields per record:
//!
//! | dataset       | prompt      | question                  | options                     | gold                      | id    |
//! |---------------|-------------|---------------------------|-----------------------------|---------------------------|-------|
//! | COPA          | `premise`   | `question` (cause/effect) | `choice1`, `choice2`        | `label` (0-based)         | `idx` |
//! | CommonsenseQA | `question.stem` | (empty)               | `question.choices[].text`   | `answerKey` (letter)      | `id`  |
//! | SocialIQA     | `context`   | `question`                | `answerA`, `answerB`, `answerC` | `label` (1-based)     | `id`  |
//! | Winogrande    | `sentence`  | (empty)                   | `option1`, `option2`        | `answer` (1-based)        | `qID` |
//!
//! Integer labels may be given as JSON numbers or numeric strings.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::selection::{InstanceError, QaInstance};
use crate::taxonomy::DatasetKind;

pub const COPA_CAUSE_QUESTION: &str = "What was the cause of this?";
pub const COPA_EFFECT_QUESTION: &str = "What happened as a result?";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing or invalid field `{field}`")]
    Schema { line: usize, field: String },
    #[error("line {line}: {source}")]
    Instance {
        line: usize,
        #[source]
        source: InstanceError,
    },
}

impl DatasetError {
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Io { .. } => None,
            Self::Parse { line, .. } | Self::Schema { line, .. } | Self::Instance { line, .. } => {
                Some(*line)
            }
        }
    }
}

/// One parsed input line before field mapping.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub dataset: DatasetKind,
    pub line_number: usize,
    pub payload: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Log and drop malformed lines instead of failing.
    pub skip_bad_lines: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub instances: Vec<QaInstance>,
    pub skipped_lines: Vec<usize>,
}

pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Vec<QaInstance>, DatasetError> {
    Ok(load_dataset_with(path, kind, LoadOptions::default())?.instances)
}

pub fn load_dataset_with(
    path: &Path,
    kind: DatasetKind,
    options: LoadOptions,
) -> Result<LoadedDataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, kind, options)
}

pub fn parse_dataset(
    text: &str,
    kind: DatasetKind,
    options: LoadOptions,
) -> Result<LoadedDataset, DatasetError> {
    let mut loaded = LoadedDataset::default();
    for (index, line) in text.lines().enumerate() {
        let line_number = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let result = parse_line(line, line_number, kind).and_then(|raw| to_instance(&raw));
        match result {
            Ok(instance) => loaded.instances.push(instance),
            Err(err) if options.skip_bad_lines => {
                tracing::warn!("skipping {kind} record: {err}");
                loaded.skipped_lines.push(line_number);
            }
            Err(err) => return Err(err),
        }
    }
    Ok(loaded)
}

fn parse_line(line: &str, line_number: usize, kind: DatasetKind) -> Result<RawRecord, DatasetError> {
    let value: Value = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
        line: line_number,
        message: e.to_string(),
    })?;
    match value {
        Value::Object(payload) => Ok(RawRecord {
            dataset: kind,
            line_number,
            payload,
        }),
        _ => Err(DatasetError::Parse {
            line: line_number,
            message: "expected a JSON object".into(),
        }),
    }
}

struct Fields<'a> {
    raw: &'a RawRecord,
}

impl<'a> Fields<'a> {
    fn missing(&self, field: &str) -> DatasetError {
        DatasetError::Schema {
            line: self.raw.line_number,
            field: field.to_string(),
        }
    }

    fn value(&self, field: &str) -> Result<&'a Value, DatasetError> {
        self.raw.payload.get(field).ok_or_else(|| self.missing(field))
    }

    fn text(&self, field: &str) -> Result<String, DatasetError> {
        match self.value(field)? {
            Value::String(s) => Ok(s.trim().to_string()),
            _ => Err(self.missing(field)),
        }
    }

    fn integer(&self, field: &str) -> Result<i64, DatasetError> {
        match self.value(field)? {
            Value::Number(n) => n.as_i64().ok_or_else(|| self.missing(field)),
            Value::String(s) => s.trim().parse().map_err(|_| self.missing(field)),
            _ => Err(self.missing(field)),
        }
    }

    fn id(&self, key: &str) -> String {
        match self.raw.payload.get(key) {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("{}:{}", self.raw.dataset, self.raw.line_number),
        }
    }
}

fn to_instance(raw: &RawRecord) -> Result<QaInstance, DatasetError> {
    let f = Fields { raw };
    let line = raw.line_number;
    let (id, prompt, question, options, gold) = match raw.dataset {
        DatasetKind::Copa => {
            let framing = match f.text("question")?.to_ascii_lowercase().as_str() {
                "cause" => COPA_CAUSE_QUESTION,
                "effect" => COPA_EFFECT_QUESTION,
                _ => return Err(f.missing("question")),
            };
            (
                f.id("idx"),
                f.text("premise")?,
                framing.to_string(),
                vec![f.text("choice1")?, f.text("choice2")?],
                f.integer("label")?,
            )
        }
        DatasetKind::SocialIqa => (
            f.id("id"),
            f.text("context")?,
            f.text("question")?,
            vec![f.text("answerA")?, f.text("answerB")?, f.text("answerC")?],
            f.integer("label")? - 1,
        ),
        DatasetKind::CommonsenseQa => {
            let question = f
                .value("question")?
                .as_object()
                .ok_or_else(|| f.missing("question"))?;
            let stem = question
                .get("stem")
                .and_then(Value::as_str)
                .ok_or_else(|| f.missing("question.stem"))?;
            let choices = question
                .get("choices")
                .and_then(Value::as_array)
                .ok_or_else(|| f.missing("question.choices"))?;
            let mut by_label = BTreeMap::new();
            let mut options = Vec::with_capacity(choices.len());
            for (i, choice) in choices.iter().enumerate() {
                let text = choice
                    .get("text")
                    .and_then(Value::as_str)
                    .ok_or_else(|| f.missing("question.choices.text"))?;
                let label = choice
                    .get("label")
                    .and_then(Value::as_str)
                    .ok_or_else(|| f.missing("question.choices.label"))?;
                by_label.insert(label.trim().to_string(), i);
                options.push(text.trim().to_string());
            }
            let key = f.text("answerKey")?;
            let gold = *by_label.get(&key).ok_or_else(|| f.missing("answerKey"))?;
            (f.id("id"), stem.trim().to_string(), String::new(), options, gold as i64)
        }
        DatasetKind::Winogrande => {
            let sentence = f.text("sentence")?;
            if !sentence.contains('_') {
                return Err(f.missing("sentence"));
            }
            (
                f.id("qID"),
                sentence,
                String::new(),
                vec![f.text("option1")?, f.text("option2")?],
                f.integer("answer")? - 1,
            )
        }
    };
    let gold = usize::try_from(gold).map_err(|_| {
        f.missing(match raw.dataset {
            DatasetKind::Copa | DatasetKind::SocialIqa => "label",
            DatasetKind::CommonsenseQa => "answerKey",
            DatasetKind::Winogrande => "answer",
        })
    })?;
    QaInstance::new(id, raw.dataset, prompt, question, options, gold)
        .map_err(|source| DatasetError::Instance { line, source })
}

/// Fills the `_` blank of a Winogrande sentence with `option`.
pub fn fill_blank(sentence: &str, option: &str) -> String {
    sentence.replacen('_', option, 1)
}

const NON_NAMES: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "he", "she", "it", "they", "we", "i",
    "you", "his", "her", "hers", "their", "our", "my", "your", "its", "him", "them", "there",
    "then", "when", "after", "before", "while", "if", "but", "and", "so", "as", "because",
    "since", "although", "on", "in", "at", "for", "with", "today", "yesterday", "tomorrow",
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "january",
    "february", "march", "april", "may", "june", "july", "august", "september", "october",
    "november", "december", "christmas", "mr", "mrs", "ms", "dr",
];

fn clean_token(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

fn is_name_candidate(token: &str) -> bool {
    let mut chars = token.chars();
    match chars.next() {
        Some(c) if c.is_uppercase() => {}
        _ => return false,
    }
    token.chars().all(|c| c.is_alphabetic() || c == '\'' || c == '-')
        && !NON_NAMES.contains(&token.to_lowercase().as_str())
}

/// Picks the person a context is about.
///
/// Order of preference: the opening token of the context when it is a
/// capitalized non-function word, then the first capitalized token that is
/// not sentence-initial, then a sentence-initial token that recurs later.
/// Weekday/month names, pronouns and determiners are never names.
pub fn extract_name(context: &str) -> Option<String> {
    let mut tokens = Vec::new();
    let mut sentence_start = true;
    for raw in context.split_whitespace() {
        let token = clean_token(raw);
        if !token.is_empty() {
            tokens.push((token, sentence_start));
        }
        sentence_start = raw.ends_with(['.', '!', '?']);
    }

    if let Some(&(first, _)) = tokens.first() {
        if is_name_candidate(first) {
            return Some(first.to_string());
        }
    }
    if let Some(&(token, _)) = tokens
        .iter()
        .find(|(token, initial)| !initial && is_name_candidate(token))
    {
        return Some(token.to_string());
    }
    tokens
        .iter()
        .enumerate()
        .find(|(i, (token, initial))| {
            *initial
                && is_name_candidate(token)
                && tokens[i + 1..].iter().any(|(later, _)| later == token)
        })
        .map(|(_, (token, _))| token.to_string())
}
