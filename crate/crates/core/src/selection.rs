//! Candidate assembly, scoring, and answer selection under a level
//! restriction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::fill_blank;
use crate::lm_backend::{join_text, Backend, BackendError, ScoreMode, ScoreValue};
use crate::selftalk::{Clarification, ClarificationSet};
use crate::taxonomy::{DatasetKind, TaxonomyLevel};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstanceError {
    #[error("an instance needs at least two options, got {0}")]
    TooFewOptions(usize),
    #[error("gold index {gold} is out of range for {options} options")]
    GoldOutOfRange { gold: usize, options: usize },
    #[error("option `{0}` appears more than once")]
    DuplicateOption(String),
}

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("instance {0} has no clarifications")]
    EmptyClarificationSet(String),
    #[error("no clarification at level {0}")]
    NoClarificationAtLevel(TaxonomyLevel),
    #[error("score matrix is empty")]
    EmptyMatrix,
    #[error("score matrix shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// One multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub dataset: DatasetKind,
    /// Context passage; for Winogrande the sentence with its `_` blank.
    pub prompt: String,
    /// May be empty when the dataset has no separate question.
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
}

impl QaInstance {
    pub fn new(
        id: impl Into<String>,
        dataset: DatasetKind,
        prompt: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        gold_index: usize,
    ) -> Result<Self, InstanceError> {
        if options.len() < 2 {
            return Err(InstanceError::TooFewOptions(options.len()));
        }
        if gold_index >= options.len() {
            return Err(InstanceError::GoldOutOfRange {
                gold: gold_index,
                options: options.len(),
            });
        }
        for (i, option) in options.iter().enumerate() {
            if options[..i].contains(option) {
                return Err(InstanceError::DuplicateOption(option.clone()));
            }
        }
        Ok(Self {
            id: id.into(),
            dataset,
            prompt: prompt.into(),
            question: question.into(),
            options,
            gold_index,
        })
    }

    pub fn option_count(&self) -> usize {
        self.options.len()
    }
}

/// A candidate text split into the conditioning context and the part that
/// carries the answer option.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub context: String,
    pub continuation: String,
}

impl Candidate {
    pub fn text(&self) -> String {
        join_text(&[&self.context, &self.continuation])
    }
}

/// Builds the candidate for `(clarification, option)`.
///
/// Prompt, question, clarification and option are joined with single
/// spaces. Winogrande has no separate option slot: the option fills the
/// sentence's blank and the clarification goes before the sentence.
pub fn assemble_candidate_parts(
    instance: &QaInstance,
    clarification: &Clarification,
    option_index: usize,
) -> Candidate {
    let option = &instance.options[option_index];
    match instance.dataset {
        DatasetKind::Winogrande if instance.prompt.contains('_') => {
            let (before, after) = instance
                .prompt
                .split_once('_')
                .expect("checked for blank");
            Candidate {
                context: join_text(&[&clarification.answer_text, before]),
                continuation: join_text(&[option, after]),
            }
        }
        _ => Candidate {
            context: join_text(&[&instance.prompt, &instance.question, &clarification.answer_text]),
            continuation: option.trim().to_string(),
        },
    }
}

pub fn assemble_candidate(
    instance: &QaInstance,
    clarification: &Clarification,
    option_index: usize,
) -> String {
    assemble_candidate_parts(instance, clarification, option_index).text()
}

/// Candidate text without any clarification, as a plain zero-shot scorer
/// would see it.
pub fn assemble_plain(instance: &QaInstance, option_index: usize) -> String {
    match instance.dataset {
        DatasetKind::Winogrande if instance.prompt.contains('_') => {
            fill_blank(&instance.prompt, &instance.options[option_index])
        }
        _ => join_text(&[&instance.prompt, &instance.question, &instance.options[option_index]]),
    }
}

/// Scores for every (clarification, option) pair of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub instance_id: String,
    pub option_count: usize,
    /// Global `j` order: level ascending, then generation order.
    pub clarifications: Vec<Clarification>,
    /// `entries[j][o]`.
    pub entries: Vec<Vec<ScoreValue>>,
    pub mode: ScoreMode,
}

impl ScoreMatrix {
    pub fn new(
        instance_id: impl Into<String>,
        option_count: usize,
        clarifications: Vec<Clarification>,
        entries: Vec<Vec<ScoreValue>>,
        mode: ScoreMode,
    ) -> Result<Self, SelectionError> {
        if clarifications.len() != entries.len() {
            return Err(SelectionError::Shape(format!(
                "{} clarifications but {} score rows",
                clarifications.len(),
                entries.len()
            )));
        }
        if let Some(row) = entries.iter().find(|row| row.len() != option_count) {
            return Err(SelectionError::Shape(format!(
                "row has {} scores, expected {option_count}",
                row.len()
            )));
        }
        Ok(Self {
            instance_id: instance_id.into(),
            option_count,
            clarifications,
            entries,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.clarifications.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clarifications.is_empty()
    }

    pub fn level_of(&self, j: usize) -> TaxonomyLevel {
        self.clarifications[j].level
    }

    /// The configured score field of entry `(j, o)`.
    pub fn value(&self, j: usize, o: usize) -> f64 {
        self.entries[j][o].get(self.mode)
    }
}

/// Scores every candidate of `instance` against `set`.
///
/// Any backend failure aborts the whole matrix.
pub fn score_all(
    instance: &QaInstance,
    set: &ClarificationSet,
    backend: &dyn Backend,
    mode: ScoreMode,
) -> Result<ScoreMatrix, SelectionError> {
    if set.is_empty() {
        return Err(SelectionError::EmptyClarificationSet(instance.id.clone()));
    }
    let clarifications: Vec<Clarification> = set.iter().cloned().collect();
    let mut entries = Vec::with_capacity(clarifications.len());
    for clarification in &clarifications {
        let row = (0..instance.option_count())
            .map(|o| {
                let candidate = assemble_candidate_parts(instance, clarification, o);
                backend.score_continuation(&candidate.context, &candidate.continuation)
            })
            .collect::<Result<Vec<_>, _>>()?;
        entries.push(row);
    }
    ScoreMatrix::new(
        &instance.id,
        instance.option_count(),
        clarifications,
        entries,
        mode,
    )
}

/// Which clarifications selection may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Restriction {
    /// Any clarification, whatever its level.
    ChoiceBaseline,
    Level(TaxonomyLevel),
}

impl Restriction {
    pub fn level(self) -> Option<TaxonomyLevel> {
        match self {
            Self::ChoiceBaseline => None,
            Self::Level(level) => Some(level),
        }
    }

    pub fn admits(self, level: TaxonomyLevel) -> bool {
        match self {
            Self::ChoiceBaseline => true,
            Self::Level(l) => l == level,
        }
    }

    /// Row label like `0A: Choice Baseline` or `2B: Understand`.
    pub fn label(self, dataset: DatasetKind) -> String {
        let letter = dataset.report_letter();
        match self {
            Self::ChoiceBaseline => format!("0{letter}: Choice Baseline"),
            Self::Level(level) => format!("{}{letter}: {}", level.value(), level.name()),
        }
    }
}

impl fmt::Display for Restriction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ChoiceBaseline => f.write_str("choice"),
            Self::Level(level) => write!(f, "{level}"),
        }
    }
}

impl FromStr for Restriction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "choice" | "baseline" | "0" => Ok(Self::ChoiceBaseline),
            other => other
                .parse::<i64>()
                .ok()
                .and_then(|v| TaxonomyLevel::new(v).ok())
                .map(Self::Level)
                .ok_or_else(|| format!("unknown restriction `{s}` (expected 1, 2, 3 or choice)")),
        }
    }
}

impl Serialize for Restriction {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Restriction {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(i64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(n) => n.to_string().parse(),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_option: usize,
    pub chosen_clarification: usize,
    pub best_score: f64,
    pub restriction: Restriction,
}

/// `argmax_o max_{j admitted} score(j, o)`.
///
/// Ties go to the lowest `j`, then the lowest `o`. NaN scores never win.
pub fn select(matrix: &ScoreMatrix, restriction: Restriction) -> Option<SelectionResult> {
    let mut best: Option<(usize, usize, f64)> = None;
    for j in (0..matrix.len()).filter(|&j| restriction.admits(matrix.level_of(j))) {
        for o in 0..matrix.option_count {
            let raw = matrix.value(j, o);
            let value = if raw.is_nan() { f64::NEG_INFINITY } else { raw };
            if best.is_none_or(|(_, _, b)| value > b) {
                best = Some((j, o, value));
            }
        }
    }
    best.map(|(j, o, _)| SelectionResult {
        chosen_option: o,
        chosen_clarification: j,
        best_score: matrix.value(j, o),
        restriction,
    })
}

/// Selection restricted to clarifications of `level`.
pub fn select_answer(
    matrix: &ScoreMatrix,
    level: TaxonomyLevel,
) -> Result<SelectionResult, SelectionError> {
    select(matrix, Restriction::Level(level)).ok_or(SelectionError::NoClarificationAtLevel(level))
}

/// Selection over all clarifications regardless of level.
pub fn choice_baseline(matrix: &ScoreMatrix) -> Result<SelectionResult, SelectionError> {
    select(matrix, Restriction::ChoiceBaseline).ok_or(SelectionError::EmptyMatrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_backend::{ScoreSource, StubBackend, StubTable, TableScore};
    use crate::selftalk::ClarificationQuestion;

    pub(crate) fn clarification(text: &str, level: TaxonomyLevel) -> Clarification {
        Clarification {
            question: ClarificationQuestion {
                prefix_id: "test/prefix".into(),
                full_question: "What is it?".into(),
                completion_span: "it".into(),
                level,
            },
            answer_text: text.into(),
            level,
        }
    }

    fn matrix(levels: &[TaxonomyLevel], scores: &[&[f64]]) -> ScoreMatrix {
        let clarifications = levels
            .iter()
            .enumerate()
            .map(|(j, l)| clarification(&format!("c{j}"), *l))
            .collect();
        let entries = scores
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| ScoreValue::new(*v, 1, ScoreSource::FullText))
                    .collect()
            })
            .collect();
        ScoreMatrix::new("m", scores[0].len(), clarifications, entries, ScoreMode::Normalized)
            .unwrap()
    }

    fn faucet() -> QaInstance {
        QaInstance::new(
            "copa-faucet",
            DatasetKind::Copa,
            "The man turned on the faucet.",
            "What happened as a result?",
            vec![
                "The toilet filled with water.".into(),
                "Water flowed from the spout.".into(),
            ],
            1,
        )
        .unwrap()
    }

    use TaxonomyLevel::{Remember as L1, Understand as L2};

    #[test]
    fn instance_invariants() {
        assert_eq!(
            QaInstance::new("x", DatasetKind::Copa, "p", "q", vec!["a".into()], 0),
            Err(InstanceError::TooFewOptions(1))
        );
        assert!(matches!(
            QaInstance::new("x", DatasetKind::Copa, "p", "q", vec!["a".into(), "b".into()], 2),
            Err(InstanceError::GoldOutOfRange { .. })
        ));
        assert!(matches!(
            QaInstance::new("x", DatasetKind::Copa, "p", "q", vec!["a".into(), "a".into()], 0),
            Err(InstanceError::DuplicateOption(_))
        ));
    }

    #[test]
    fn assembles_in_order() {
        let inst = faucet();
        let c = clarification("As a result of that, he was forced to drink water.", L2);
        assert_eq!(
            assemble_candidate(&inst, &c, 1),
            "The man turned on the faucet. What happened as a result? As a result of that, he was forced to drink water. Water flowed from the spout."
        );
    }

    #[test]
    fn empty_question_leaves_no_double_space() {
        let mut inst = faucet();
        inst.question.clear();
        let c = clarification("As a result of that, he was forced to drink water.", L2);
        let text = assemble_candidate(&inst, &c, 0);
        assert!(!text.contains("  "));
        assert_eq!(
            text,
            "The man turned on the faucet. As a result of that, he was forced to drink water. The toilet filled with water."
        );
    }

    #[test]
    fn options_differ_only_in_suffix() {
        let inst = faucet();
        let c = clarification("It rained.", L1);
        let a = assemble_candidate_parts(&inst, &c, 0);
        let b = assemble_candidate_parts(&inst, &c, 1);
        assert_eq!(a.context, b.context);
        assert_ne!(a.continuation, b.continuation);
        assert!(assemble_candidate(&inst, &c, 0).ends_with(&inst.options[0]));
    }

    #[test]
    fn winogrande_fills_blank() {
        let inst = QaInstance::new(
            "w",
            DatasetKind::Winogrande,
            "He went to the _ because his paper could wait.",
            "",
            vec!["cafe".into(), "library".into()],
            0,
        )
        .unwrap();
        let c = clarification("cafe is defined as a place where people gather for refreshment.", L1);
        assert_eq!(
            assemble_candidate(&inst, &c, 0),
            "cafe is defined as a place where people gather for refreshment. He went to the cafe because his paper could wait."
        );
        let parts = assemble_candidate_parts(&inst, &c, 1);
        assert!(parts.continuation.starts_with("library because"));
        assert_eq!(assemble_plain(&inst, 1), "He went to the library because his paper could wait.");
    }

    #[test]
    fn score_all_covers_every_pair() {
        let inst = faucet();
        let mut set = ClarificationSet::empty(&inst.id, 1);
        set.by_level.insert(L2, vec![clarification("c0.", L2), clarification("c1.", L2)]);
        let mut table = StubTable::default();
        let scores = [[-1.0, -2.0], [-3.0, -0.5]];
        for (c, row) in set.iter().zip(scores) {
            for (o, score) in row.into_iter().enumerate() {
                table
                    .scores
                    .insert(assemble_candidate(&inst, c, o), TableScore::Value(score));
            }
        }
        let m = score_all(&inst, &set, &StubBackend::table(table), ScoreMode::Normalized).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries.iter().map(Vec::len).sum::<usize>(), 4);
        for (j, row) in scores.iter().enumerate() {
            for (o, score) in row.iter().enumerate() {
                assert_eq!(m.value(j, o), *score);
            }
        }
        let r = select_answer(&m, L2).unwrap();
        assert_eq!((r.chosen_option, r.chosen_clarification, r.best_score), (1, 1, -0.5));
    }

    #[test]
    fn score_all_orders_by_level() {
        let inst = faucet();
        let mut set = ClarificationSet::empty(&inst.id, 1);
        set.by_level.insert(L2, vec![clarification("later.", L2)]);
        set.by_level.insert(L1, vec![clarification("first.", L1)]);
        let m = score_all(&inst, &set, &StubBackend::hashed(3), ScoreMode::Sum).unwrap();
        assert_eq!(m.level_of(0), L1);
        assert_eq!(m.level_of(1), L2);
    }

    #[test]
    fn score_all_rejects_empty_set() {
        let inst = faucet();
        let set = ClarificationSet::empty(&inst.id, 1);
        assert!(matches!(
            score_all(&inst, &set, &StubBackend::hashed(1), ScoreMode::Normalized),
            Err(SelectionError::EmptyClarificationSet(_))
        ));
    }

    #[test]
    fn score_all_aborts_on_backend_error() {
        let inst = faucet();
        let mut set = ClarificationSet::empty(&inst.id, 1);
        set.by_level.insert(L1, vec![clarification("c.", L1)]);
        let result = score_all(&inst, &set, &StubBackend::table(StubTable::default()), ScoreMode::Normalized);
        assert!(matches!(result, Err(SelectionError::Backend(_))));
    }

    #[test]
    fn restricted_selection() {
        let m = matrix(&[L2, L2], &[&[-1.0, -2.0], &[-3.0, -0.5]]);
        let r = select_answer(&m, L2).unwrap();
        assert_eq!(r.chosen_option, 1);
        assert_eq!(r.chosen_clarification, 1);
        assert_eq!(r.restriction, Restriction::Level(L2));
        assert!(matches!(
            select_answer(&m, L1),
            Err(SelectionError::NoClarificationAtLevel(L1))
        ));
    }

    #[test]
    fn single_row_dominant_option() {
        let m = matrix(&[L1], &[&[-5.0, -1.0, -3.0]]);
        assert_eq!(select_answer(&m, L1).unwrap().chosen_option, 1);
        assert_eq!(choice_baseline(&m).unwrap(), SelectionResult {
            restriction: Restriction::ChoiceBaseline,
            ..select_answer(&m, L1).unwrap()
        });
    }

    #[test]
    fn baseline_follows_global_max() {
        let m = matrix(&[L1, L2], &[&[-0.1, -2.0], &[-3.0, -1.0]]);
        let base = choice_baseline(&m).unwrap();
        assert_eq!((base.chosen_option, base.chosen_clarification), (0, 0));
        assert_eq!(select_answer(&m, L2).unwrap().chosen_option, 1);
    }

    #[test]
    fn uniform_scores_pick_first() {
        let m = matrix(&[L1, L2, L1], &[&[-1.0, -1.0], &[-1.0, -1.0], &[-1.0, -1.0]]);
        let r = choice_baseline(&m).unwrap();
        assert_eq!((r.chosen_option, r.chosen_clarification), (0, 0));
        let r = select_answer(&m, L2).unwrap();
        assert_eq!((r.chosen_option, r.chosen_clarification), (0, 1));
    }

    #[test]
    fn nan_never_wins() {
        let m = matrix(&[L1], &[&[f64::NAN, -4.0]]);
        assert_eq!(choice_baseline(&m).unwrap().chosen_option, 1);
    }

    #[test]
    fn restriction_parsing_and_labels() {
        assert_eq!("choice".parse::<Restriction>().unwrap(), Restriction::ChoiceBaseline);
        assert_eq!("2".parse::<Restriction>().unwrap(), Restriction::Level(L2));
        assert!("4".parse::<Restriction>().is_err());
        assert_eq!(Restriction::Level(L1).label(DatasetKind::Winogrande), "1A: Remember");
        assert_eq!(
            Restriction::ChoiceBaseline.label(DatasetKind::SocialIqa),
            "0B: Choice Baseline"
        );
        let json = serde_json::to_string(&vec![Restriction::Level(L1), Restriction::ChoiceBaseline]).unwrap();
        assert_eq!(json, r#"["1","choice"]"#);
        let back: Vec<Restriction> = serde_json::from_str(r#"[1, "2", "choice"]"#).unwrap();
        assert_eq!(back.len(), 3);
    }

    #[test]
    fn shape_is_checked() {
        let err = ScoreMatrix::new(
            "m",
            2,
            vec![clarification("c", L1)],
            vec![vec![ScoreValue::empty()]],
            ScoreMode::Normalized,
        );
        assert!(matches!(err, Err(SelectionError::Shape(_))));
    }
}
