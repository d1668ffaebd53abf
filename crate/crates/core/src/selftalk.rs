//! Clarification generation: complete each question prefix, answer each
//! resulting question, and group the answers by taxonomy level.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm_backend::{join_text, Backend, BackendError, GenParams, LengthBudget};
use crate::selection::QaInstance;
use crate::taxonomy::{substitute_placeholders, PrefixTemplate, TaxonomyError, TaxonomyLevel, SPAN_PLACEHOLDER};

#[derive(Debug, Error)]
pub enum SelfTalkError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarificationQuestion {
    pub prefix_id: String,
    /// Prefix with placeholders bound, the generated span and a final `?`.
    pub full_question: String,
    /// Words the generator added after the prefix, without the `?`.
    pub completion_span: String,
    pub level: TaxonomyLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clarification {
    pub question: ClarificationQuestion,
    /// Instantiated answer prefix followed by the generated continuation.
    pub answer_text: String,
    pub level: TaxonomyLevel,
}

/// All clarifications generated for one instance under one seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarificationSet {
    pub instance_id: String,
    pub seed: u64,
    pub by_level: BTreeMap<TaxonomyLevel, Vec<Clarification>>,
    /// Templates skipped because no name could be bound.
    #[serde(default)]
    pub skipped_templates: Vec<String>,
}

impl ClarificationSet {
    pub fn empty(instance_id: impl Into<String>, seed: u64) -> Self {
        Self {
            instance_id: instance_id.into(),
            seed,
            by_level: BTreeMap::new(),
            skipped_templates: Vec::new(),
        }
    }

    pub fn at_level(&self, level: TaxonomyLevel) -> &[Clarification] {
        self.by_level.get(&level).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_level(&self, level: TaxonomyLevel) -> bool {
        !self.at_level(level).is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.by_level.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.by_level.values().map(Vec::len).sum()
    }

    /// Clarifications in level order, then generation order.
    pub fn iter(&self) -> impl Iterator<Item = &Clarification> {
        self.by_level.values().flatten()
    }
}

/// Word-overlap rule between a clarification and its instance's context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapFilter {
    /// Keep every well-formed clarification.
    #[default]
    Off,
    /// Keep clarifications sharing at least one content word with the context.
    Require,
    /// Keep clarifications sharing no content word with the context.
    Forbid,
}

impl fmt::Display for OverlapFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Require => "require",
            Self::Forbid => "forbid",
        })
    }
}

impl std::str::FromStr for OverlapFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Self::Off),
            "require" => Ok(Self::Require),
            "forbid" => Ok(Self::Forbid),
            other => Err(format!("unknown overlap filter `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTalkConfig {
    pub question_params: GenParams,
    pub answer_params: GenParams,
    #[serde(default)]
    pub overlap_filter: OverlapFilter,
}

impl Default for SelfTalkConfig {
    fn default() -> Self {
        Self {
            question_params: GenParams::clarification_questions(),
            answer_params: GenParams::clarification_answers(),
            overlap_filter: OverlapFilter::Off,
        }
    }
}

/// Prompt completed to produce clarification questions.
pub fn question_prompt(instance: &QaInstance, question_prefix: &str) -> String {
    join_text(&[&instance.prompt, question_prefix])
}

/// Prompt completed to produce a clarification answer.
pub fn answer_prompt(instance: &QaInstance, full_question: &str, answer_prefix: &str) -> String {
    join_text(&[&instance.prompt, full_question, answer_prefix])
}

/// Binds `_` in an instantiated answer prefix to the question's span.
pub fn bind_answer_prefix(answer_prefix: &str, completion_span: &str) -> String {
    answer_prefix
        .replace(SPAN_PLACEHOLDER, completion_span)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn dedup_key(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Stage 1: complete the template's question prefix.
///
/// Prefixes that are already full questions (ending in `?`) are used as is
/// without a generation request.
pub fn ask_clarification_questions(
    backend: &dyn Backend,
    instance: &QaInstance,
    template: &PrefixTemplate,
    seed: u64,
    config: &SelfTalkConfig,
) -> Result<Vec<ClarificationQuestion>, SelfTalkError> {
    let (question_prefix, _) = substitute_placeholders(template, instance)?;
    if question_prefix.ends_with('?') {
        return Ok(vec![ClarificationQuestion {
            prefix_id: template.id.clone(),
            full_question: question_prefix,
            completion_span: String::new(),
            level: template.level,
        }]);
    }

    let params = config.question_params.clone().with_seed(seed);
    let word_limit = match params.budget {
        LengthBudget::Words(n) => Some(n),
        LengthBudget::Tokens(_) => None,
    };
    let completions = backend.generate(&question_prompt(instance, &question_prefix), &params)?;

    let mut seen = HashSet::new();
    let mut questions = Vec::new();
    for completion in completions {
        let completion = completion.trim();
        let Some(span) = completion.strip_suffix('?') else {
            continue;
        };
        let span = span.split_whitespace().collect::<Vec<_>>().join(" ");
        let words = span.split_whitespace().count();
        if words == 0 || span.contains('?') || word_limit.is_some_and(|n| words > n) {
            continue;
        }
        let full_question = format!("{question_prefix} {span}?");
        if seen.insert(dedup_key(&full_question)) {
            questions.push(ClarificationQuestion {
                prefix_id: template.id.clone(),
                full_question,
                completion_span: span,
                level: template.level,
            });
        }
    }
    Ok(questions)
}

/// Stage 2: answer one clarification question, primed with the template's
/// answer prefix.
pub fn answer_clarification(
    backend: &dyn Backend,
    question: &ClarificationQuestion,
    template: &PrefixTemplate,
    instance: &QaInstance,
    seed: u64,
    config: &SelfTalkConfig,
) -> Result<Vec<Clarification>, SelfTalkError> {
    let (_, answer_prefix) = substitute_placeholders(template, instance)?;
    let answer_prefix = bind_answer_prefix(&answer_prefix, &question.completion_span);
    let params = config.answer_params.clone().with_seed(seed);
    let prompt = answer_prompt(instance, &question.full_question, &answer_prefix);
    let completions = backend.generate(&prompt, &params)?;

    let mut seen = HashSet::new();
    let mut answers = Vec::new();
    for completion in completions {
        let continuation = completion.trim();
        if continuation.is_empty() {
            continue;
        }
        let answer_text = join_text(&[&answer_prefix, continuation]);
        if seen.insert(dedup_key(&answer_text)) {
            answers.push(Clarification {
                question: question.clone(),
                answer_text,
                level: template.level,
            });
        }
    }
    Ok(answers)
}

const OVERLAP_STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "is", "was", "are", "were", "be", "and", "or", "in", "on", "at",
    "for", "with", "that", "this", "it", "as", "by", "from", "he", "she", "they", "his", "her",
    "their", "them", "what", "did", "do", "does",
];

fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !OVERLAP_STOPWORDS.contains(&w.as_str()))
        .collect()
}

fn passes_overlap(filter: OverlapFilter, context: &BTreeSet<String>, clarification: &Clarification) -> bool {
    if filter == OverlapFilter::Off {
        return true;
    }
    let overlaps = !content_words(&clarification.answer_text).is_disjoint(context);
    match filter {
        OverlapFilter::Off => true,
        OverlapFilter::Require => overlaps,
        OverlapFilter::Forbid => !overlaps,
    }
}

/// Stages 1 and 2 over every template, grouped by level.
///
/// Templates whose `[NAME]` cannot be bound are skipped and listed in
/// `skipped_templates`. The output order is registry order, then sample
/// order.
pub fn generate_clarifications(
    backend: &dyn Backend,
    instance: &QaInstance,
    registry: &[PrefixTemplate],
    seed: u64,
    config: &SelfTalkConfig,
) -> Result<ClarificationSet, BackendError> {
    let mut set = ClarificationSet::empty(&instance.id, seed);
    let context = content_words(&join_text(&[&instance.prompt, &instance.question]));
    let mut seen: BTreeMap<TaxonomyLevel, HashSet<String>> = BTreeMap::new();

    for template in registry {
        let questions = match ask_clarification_questions(backend, instance, template, seed, config) {
            Ok(questions) => questions,
            Err(SelfTalkError::Backend(err)) => return Err(err),
            Err(SelfTalkError::Taxonomy(err)) => {
                tracing::debug!("instance {}: skipping {}: {err}", instance.id, template.id);
                set.skipped_templates.push(template.id.clone());
                continue;
            }
        };
        for question in &questions {
            let answers = match answer_clarification(backend, question, template, instance, seed, config) {
                Ok(answers) => answers,
                Err(SelfTalkError::Backend(err)) => return Err(err),
                Err(SelfTalkError::Taxonomy(_)) => continue,
            };
            for clarification in answers {
                if !passes_overlap(config.overlap_filter, &context, &clarification) {
                    continue;
                }
                let key = dedup_key(&clarification.answer_text);
                if seen.entry(clarification.level).or_default().insert(key) {
                    set.by_level
                        .entry(clarification.level)
                        .or_default()
                        .push(clarification);
                }
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_backend::{StubBackend, StubTable};
    use crate::taxonomy::{prefixes_for, DatasetKind};

    fn copa_instance() -> QaInstance {
        QaInstance::new(
            "copa-1",
            DatasetKind::Copa,
            "My car had a flat tire.",
            "What happened as a result?",
            vec!["I called a tow truck.".into(), "I went swimming.".into()],
            0,
        )
        .unwrap()
    }

    fn social_instance() -> QaInstance {
        QaInstance::new(
            "siqa-1",
            DatasetKind::SocialIqa,
            "Kendall got a new sports car and could not wait to show friends.",
            "What will Kendall want to do next?",
            vec!["drive that sports car".into(), "show off his new sports car".into()],
            1,
        )
        .unwrap()
    }

    fn template(dataset: DatasetKind, question: &str) -> PrefixTemplate {
        prefixes_for(dataset)
            .into_iter()
            .find(|t| t.question_prefix == question)
            .unwrap()
    }

    fn table_backend(generations: &[(&str, &[&str])]) -> StubBackend {
        let mut table = StubTable::default();
        for (prompt, outs) in generations {
            table
                .generations
                .insert(prompt.to_string(), outs.iter().map(|s| s.to_string()).collect());
        }
        StubBackend::table(table)
    }

    #[test]
    fn completes_definition_prefix() {
        let inst = copa_instance();
        let t = template(DatasetKind::Copa, "What is the definition of");
        let prompt = question_prompt(&inst, "What is the definition of");
        let backend = table_backend(&[(
            &prompt,
            &[" a flat tire? The", "an accident?", "a flat tire?", "no question mark here", "?"],
        )]);
        let qs = ask_clarification_questions(&backend, &inst, &t, 1, &SelfTalkConfig::default()).unwrap();
        let full: Vec<_> = qs.iter().map(|q| q.full_question.as_str()).collect();
        assert_eq!(
            full,
            ["What is the definition of a flat tire?", "What is the definition of an accident?"]
        );
        assert_eq!(qs[0].completion_span, "a flat tire");
        assert_eq!(qs[0].level, TaxonomyLevel::Remember);
    }

    #[test]
    fn terminator_free_samples_yield_nothing() {
        let inst = copa_instance();
        let t = template(DatasetKind::Copa, "What is the definition of");
        let prompt = question_prompt(&inst, "What is the definition of");
        let backend = table_backend(&[(&prompt, &["a flat tire", "one two three four five six seven?"])]);
        let qs = ask_clarification_questions(&backend, &inst, &t, 1, &SelfTalkConfig::default()).unwrap();
        assert!(qs.is_empty());
    }

    #[test]
    fn complete_prefix_is_its_own_question() {
        let inst = social_instance();
        let t = template(DatasetKind::SocialIqa, "What did [NAME] do?");
        let backend = table_backend(&[]);
        let qs = ask_clarification_questions(&backend, &inst, &t, 1, &SelfTalkConfig::default()).unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].full_question, "What did Kendall do?");
        assert_eq!(qs[0].completion_span, "");
    }

    #[test]
    fn answer_binds_span_and_name() {
        let inst = copa_instance();
        let t = template(DatasetKind::Copa, "What is the definition of");
        let question = ClarificationQuestion {
            prefix_id: t.id.clone(),
            full_question: "What is the definition of a flat tire?".into(),
            completion_span: "a flat tire".into(),
            level: t.level,
        };
        let prompt = answer_prompt(&inst, &question.full_question, "The definition of a flat tire is");
        let backend = table_backend(&[(&prompt, &["that the tire does not hold air."])]);
        let answers =
            answer_clarification(&backend, &question, &t, &inst, 3, &SelfTalkConfig::default()).unwrap();
        assert_eq!(answers.len(), 1);
        assert_eq!(
            answers[0].answer_text,
            "The definition of a flat tire is that the tire does not hold air."
        );

        let inst = social_instance();
        let t = template(DatasetKind::SocialIqa, "What will [NAME] want to do next?");
        let question = ClarificationQuestion {
            prefix_id: t.id.clone(),
            full_question: "What will Kendall want to do next?".into(),
            completion_span: String::new(),
            level: t.level,
        };
        let prompt = answer_prompt(&inst, &question.full_question, "Kendall wanted");
        let backend = table_backend(&[(&prompt, &["to impress them with his new ride."])]);
        let answers =
            answer_clarification(&backend, &question, &t, &inst, 3, &SelfTalkConfig::default()).unwrap();
        assert_eq!(answers[0].answer_text, "Kendall wanted to impress them with his new ride.");
        assert_eq!(answers[0].level, TaxonomyLevel::Apply);
    }

    #[test]
    fn empty_continuations_are_dropped() {
        let inst = copa_instance();
        let t = template(DatasetKind::Copa, "What is the definition of");
        let question = ClarificationQuestion {
            prefix_id: t.id.clone(),
            full_question: "What is the definition of a flat tire?".into(),
            completion_span: "a flat tire".into(),
            level: t.level,
        };
        let backend = table_backend(&[]);
        let answers =
            answer_clarification(&backend, &question, &t, &inst, 3, &SelfTalkConfig::default()).unwrap();
        assert!(answers.is_empty());
    }

    #[test]
    fn groups_by_level_and_dedups() {
        let inst = copa_instance();
        let registry = vec![
            template(DatasetKind::Copa, "What is the definition of"),
            template(DatasetKind::Copa, "What is the main purpose of"),
        ];
        let q1 = question_prompt(&inst, "What is the definition of");
        let q2 = question_prompt(&inst, "What is the main purpose of");
        let a1 = answer_prompt(&inst, "What is the definition of a tire?", "The definition of a tire is");
        let a2 = answer_prompt(&inst, "What is the main purpose of a car?", "The purpose of a car is to");
        let backend = table_backend(&[
            (&q1, &["a tire?"]),
            (&q2, &["a car?"]),
            (&a1, &["round rubber.", "round  Rubber.", "a wheel cover."]),
            (&a2, &["drive people around."]),
        ]);
        let set = generate_clarifications(&backend, &inst, &registry, 5, &SelfTalkConfig::default()).unwrap();
        assert_eq!(
            set.by_level.keys().copied().collect::<Vec<_>>(),
            vec![TaxonomyLevel::Remember, TaxonomyLevel::Understand]
        );
        assert_eq!(set.at_level(TaxonomyLevel::Remember).len(), 2);
        assert_eq!(set.at_level(TaxonomyLevel::Understand).len(), 1);
        for (level, items) in &set.by_level {
            assert!(items.iter().all(|c| c.level == *level && c.question.level == *level));
        }
        assert!(set.iter().all(|c| !c.answer_text.is_empty()));
    }

    #[test]
    fn empty_generation_gives_empty_set() {
        let inst = copa_instance();
        let set = generate_clarifications(
            &table_backend(&[]),
            &inst,
            &prefixes_for(DatasetKind::Copa),
            1,
            &SelfTalkConfig::default(),
        )
        .unwrap();
        assert!(set.is_empty());
        assert!(set.by_level.is_empty());
    }

    #[test]
    fn unbound_name_skips_template() {
        let inst = QaInstance::new(
            "x",
            DatasetKind::SocialIqa,
            "the dog barked all night.",
            "",
            vec!["a".into(), "b".into()],
            0,
        )
        .unwrap();
        let registry = prefixes_for(DatasetKind::SocialIqa);
        let set = generate_clarifications(&StubBackend::hashed(1), &inst, &registry, 1, &SelfTalkConfig::default())
            .unwrap();
        assert!(set.is_empty());
        assert_eq!(set.skipped_templates.len(), registry.len());
    }

    #[test]
    fn hashed_stub_is_deterministic_and_respects_budgets() {
        let inst = copa_instance();
        let registry = prefixes_for(DatasetKind::Copa);
        let backend = StubBackend::hashed(9);
        let config = SelfTalkConfig::default();
        let a = generate_clarifications(&backend, &inst, &registry, 4, &config).unwrap();
        let b = generate_clarifications(&backend, &inst, &registry, 4, &config).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        for c in a.iter() {
            assert!(c.question.completion_span.split_whitespace().count() <= 6);
            assert!(c.question.full_question.ends_with('?'));
            let prefix_len = c.answer_text.split_whitespace().count();
            assert!(prefix_len > 0);
        }
    }

    #[test]
    fn overlap_filter_modes() {
        let inst = copa_instance();
        let t = template(DatasetKind::Copa, "What is the definition of");
        let q = question_prompt(&inst, "What is the definition of");
        let a = answer_prompt(&inst, "What is the definition of a wheel?", "The definition of a wheel is");
        let backend = table_backend(&[(&q, &["a wheel?"]), (&a, &["round.", "part of a car."])]);
        let run = |filter| {
            let config = SelfTalkConfig {
                overlap_filter: filter,
                ..SelfTalkConfig::default()
            };
            generate_clarifications(&backend, &inst, std::slice::from_ref(&t), 1, &config)
                .unwrap()
                .len()
        };
        assert_eq!(run(OverlapFilter::Off), 2);
        assert_eq!(run(OverlapFilter::Require), 1);
        assert_eq!(run(OverlapFilter::Forbid), 1);
    }

    #[test]
    fn set_serializes_with_numeric_levels() {
        let inst = copa_instance();
        let set = generate_clarifications(
            &StubBackend::hashed(2),
            &inst,
            &prefixes_for(DatasetKind::Copa),
            1,
            &SelfTalkConfig::default(),
        )
        .unwrap();
        let json = serde_json::to_string(&set).unwrap();
        let back: ClarificationSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }
}
