#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use bloomqa::lm_backend::{ScoreMode, ScoreSource, ScoreValue, StubTable, TableScore};
use bloomqa::selection::ScoreMatrix;
use bloomqa::selftalk::{Clarification, ClarificationQuestion};
use bloomqa::taxonomy::TaxonomyLevel;
use proptest::prelude::*;

pub fn clarification(level: u8, j: usize) -> Clarification {
    let level = TaxonomyLevel::new(level as i64).unwrap();
    Clarification {
        question: ClarificationQuestion {
            prefix_id: format!("t/{j}"),
            full_question: format!("What is q{j}?"),
            completion_span: format!("q{j}"),
            level,
        },
        answer_text: format!("q{j} is a{j}."),
        level,
    }
}

/// Matrix whose normalized score is exactly `values[j][o]`.
pub fn matrix(levels: &[u8], values: &[Vec<f64>]) -> ScoreMatrix {
    let options = values.first().map_or(2, Vec::len);
    ScoreMatrix::new(
        "m",
        options,
        levels.iter().enumerate().map(|(j, &l)| clarification(l, j)).collect(),
        values
            .iter()
            .map(|row| row.iter().map(|&v| ScoreValue::new(v, 1, ScoreSource::FullText)).collect())
            .collect(),
        ScoreMode::Normalized,
    )
    .unwrap()
}

/// Exhaustive reference: collect every admitted cell, find the maximum
/// (NaN counts as -inf), then return the lexicographically smallest
/// `(j, o)` attaining it.
pub fn oracle(
    levels: &[u8],
    values: &[Vec<f64>],
    admit: impl Fn(u8) -> bool,
) -> Option<(usize, usize)> {
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let cells: Vec<(usize, usize, f64)> = values
        .iter()
        .enumerate()
        .filter(|(j, _)| admit(levels[*j]))
        .flat_map(|(j, row)| row.iter().enumerate().map(move |(o, &v)| (j, o, key(v))))
        .collect();
    let max = cells.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    cells
        .iter()
        .filter(|c| c.2 == max)
        .map(|c| (c.0, c.1))
        .min()
}

/// Score drawn from a coarse grid half the time so that ties are common.
pub fn score_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        4 => (-6i32..=0).prop_map(|v| v as f64 * 0.5),
        4 => -12.0f64..0.0,
        1 => Just(f64::NEG_INFINITY),
        1 => Just(f64::NAN),
    ]
}

/// Random matrix: up to 10 clarifications over levels 1..=3, 2..=5 options.
pub fn random_matrix() -> impl Strategy<Value = (Vec<u8>, Vec<Vec<f64>>)> {
    (2usize..=5, 0usize..=10).prop_flat_map(|(options, rows)| {
        (
            prop::collection::vec(1u8..=3, rows),
            prop::collection::vec(prop::collection::vec(score_value(), options), rows),
        )
    })
}

pub struct WinoItem {
    pub id: String,
    pub sentence: String,
    pub options: [String; 2],
    /// 1-based as in the dataset files.
    pub answer: u8,
    /// Level-1 clarification scores per option, if the item gets one.
    pub level1: Option<[f64; 2]>,
    /// Level-2 clarification scores per option, if the item gets one.
    pub level2: Option<[f64; 2]>,
}

pub const L1_QUESTION: &str = "What is the definition of";
pub const L2_QUESTION: &str = "What is the main purpose of";

impl WinoItem {
    pub fn new(index: usize, answer: u8, level1: Option<[f64; 2]>, level2: Option<[f64; 2]>) -> Self {
        Self {
            id: format!("wg-{index}"),
            sentence: format!("Alex lent Jordan book {index} because _ had finished reading it."),
            options: ["Alex".into(), "Jordan".into()],
            answer,
            level1,
            level2,
        }
    }

    pub fn jsonl(&self) -> String {
        serde_json::json!({
            "qID": self.id,
            "sentence": self.sentence,
            "option1": self.options[0],
            "option2": self.options[1],
            "answer": self.answer.to_string(),
        })
        .to_string()
    }

    fn span(&self, level: u8) -> String {
        format!("topic{level}x{}", self.id.trim_start_matches("wg-"))
    }

    fn answer_text(&self, level: u8) -> String {
        match level {
            1 => format!("The definition of {} is a kind of loan.", self.span(1)),
            _ => format!("The purpose of {} is to share stories.", self.span(2)),
        }
    }

    /// Writes the generation and score entries this item needs. Strings are
    /// spelled out here rather than built with library helpers.
    pub fn add_to(&self, table: &mut StubTable) {
        let (before, after) = self.sentence.split_once('_').unwrap();
        let (before, after) = (before.trim_end(), after.trim_start());
        for (level, scores, question, answer_prefix, tail) in [
            (1u8, self.level1, L1_QUESTION, "The definition of", "is"),
            (2u8, self.level2, L2_QUESTION, "The purpose of", "is to"),
        ] {
            let Some(scores) = scores else { continue };
            let span = self.span(level);
            table.generations.insert(
                format!("{} {question}", self.sentence),
                vec![format!(" {span}? And then")],
            );
            let answer_text = self.answer_text(level);
            let continuation = answer_text
                .strip_prefix(&format!("{answer_prefix} {span} {tail} "))
                .unwrap()
                .to_string();
            table.generations.insert(
                format!("{} {question} {span}? {answer_prefix} {span} {tail}", self.sentence),
                vec![continuation],
            );
            for (option, score) in self.options.iter().zip(scores) {
                table.scores.insert(
                    format!("{answer_text} {before} {option} {after}"),
                    TableScore::Value(score),
                );
            }
        }
    }

    /// Option index chosen among the given `(level, scores)` rows, rows in
    /// generation order, ties to the earlier row then the lower option.
    pub fn expected(&self, admit: impl Fn(u8) -> bool) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (level, scores) in [(1u8, self.level1), (2u8, self.level2)] {
            let Some(scores) = scores.filter(|_| admit(level)) else {
                continue;
            };
            for (o, s) in scores.into_iter().enumerate() {
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, o));
                }
            }
        }
        best.map(|(_, o)| o)
    }
}

pub fn write_fixture(dir: &Path, items: &[WinoItem]) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut table = StubTable::default();
    let mut data = String::new();
    for item in items {
        item.add_to(&mut table);
        let _ = writeln!(data, "{}", item.jsonl());
    }
    let data_path = dir.join("dev.jsonl");
    let table_path = dir.join("table.json");
    std::fs::write(&data_path, data).unwrap();
    std::fs::write(&table_path, serde_json::to_string_pretty(&table).unwrap()).unwrap();
    (data_path, table_path)
}

/// `count` Winogrande-shaped records with varied wording.
pub fn generated_winogrande(count: usize) -> String {
    const PEOPLE: &[(&str, &str)] = &[
        ("Robert", "Derrick"),
        ("Maria", "Elena"),
        ("Kevin", "Brian"),
        ("Sarah", "Rachel"),
        ("Neil", "Adam"),
    ];
    const FRAMES: &[&str] = &[
        "{a} asked {b} for help with the garden because _ knew a lot about plants.",
        "{a} could not lift the box as well as {b} because _ was weaker.",
        "The soup that {a} made tasted better than {b}'s because _ used fresh herbs.",
        "{a} paid {b} back the money because _ had borrowed it last week.",
    ];
    let mut out = String::new();
    for i in 0..count {
        let (a, b) = PEOPLE[i % PEOPLE.len()];
        let frame = FRAMES[(i / PEOPLE.len()) % FRAMES.len()];
        let sentence = frame.replace("{a}", a).replace("{b}", b);
        let record = serde_json::json!({
            "qID": format!("gen-{i:03}"),
            "sentence": format!("{sentence} (case {i})"),
            "option1": a,
            "option2": b,
            "answer": ((i % 2) + 1).to_string(),
        });
        let _ = writeln!(out, "{record}");
    }
    out
}
