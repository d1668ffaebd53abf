//! Taxonomy levels, per-dataset prefix registries and the proximal-level rule.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::extract_name;
use crate::selection::QaInstance;

/// Placeholder bound to the person named in a context.
pub const NAME_PLACEHOLDER: &str = "[NAME]";
/// Placeholder in answer prefixes bound to the generated question span.
pub const SPAN_PLACEHOLDER: char = '_';

const BUNDLED_REGISTRY: &str = include_str!("../data/prefixes.toml");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy level {0} is outside 1..=3")]
    InvalidLevel(i64),
    #[error("proximal context is undefined for level-1 questions")]
    NoProximalLevel,
    #[error("no name could be extracted from the context")]
    NameNotFound,
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("failed to read registry {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse registry: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("registry template `{id}`: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error("registry has no templates for {0}")]
    MissingDataset(DatasetKind),
    #[error("registry for {dataset} has no template at proximal level {level}")]
    MissingProximal {
        dataset: DatasetKind,
        level: TaxonomyLevel,
    },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Cognitive level of a question or clarification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum TaxonomyLevel {
    Remember = 1,
    Understand = 2,
    Apply = 3,
}

impl TaxonomyLevel {
    pub const ALL: [TaxonomyLevel; 3] = [Self::Remember, Self::Understand, Self::Apply];

    pub fn new(value: i64) -> Result<Self, TaxonomyError> {
        match value {
            1 => Ok(Self::Remember),
            2 => Ok(Self::Understand),
            3 => Ok(Self::Apply),
            other => Err(TaxonomyError::InvalidLevel(other)),
        }
    }

    pub fn value(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Remember => "Remember",
            Self::Understand => "Understand",
            Self::Apply => "Apply",
        }
    }

    /// The level one below `self`, which supplies proximal context.
    pub fn proximal(self) -> Result<TaxonomyLevel, TaxonomyError> {
        match self {
            Self::Remember => Err(TaxonomyError::NoProximalLevel),
            other => TaxonomyLevel::new(i64::from(other.value()) - 1),
        }
    }
}

impl TryFrom<u8> for TaxonomyLevel {
    type Error = TaxonomyError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Self::new(i64::from(value))
    }
}

impl From<TaxonomyLevel> for u8 {
    fn from(level: TaxonomyLevel) -> u8 {
        level.value()
    }
}

impl fmt::Display for TaxonomyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Copa,
    #[serde(rename = "commonsenseqa")]
    CommonsenseQa,
    #[serde(rename = "socialiqa")]
    SocialIqa,
    Winogrande,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        Self::Copa,
        Self::CommonsenseQa,
        Self::SocialIqa,
        Self::Winogrande,
    ];

    /// Level of the questions the benchmark asks.
    pub fn dataset_level(self) -> TaxonomyLevel {
        match self {
            Self::Winogrande => TaxonomyLevel::Understand,
            Self::Copa | Self::CommonsenseQa | Self::SocialIqa => TaxonomyLevel::Apply,
        }
    }

    pub fn proximal_level(self) -> Result<TaxonomyLevel, TaxonomyError> {
        self.dataset_level().proximal()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Copa => "copa",
            Self::CommonsenseQa => "commonsenseqa",
            Self::SocialIqa => "socialiqa",
            Self::Winogrande => "winogrande",
        }
    }

    /// Row letter used in report labels such as `1A: Remember`.
    pub fn report_letter(self) -> char {
        match self {
            Self::Winogrande => 'A',
            Self::SocialIqa => 'B',
            Self::Copa => 'C',
            Self::CommonsenseQa => 'D',
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "copa" => Ok(Self::Copa),
            "commonsenseqa" | "csqa" => Ok(Self::CommonsenseQa),
            "socialiqa" | "siqa" | "social_iqa" => Ok(Self::SocialIqa),
            "winogrande" => Ok(Self::Winogrande),
            _ => Err(TaxonomyError::UnknownDataset(s.to_string())),
        }
    }
}

/// Proximal level for a benchmark whose questions sit at `dataset_level`.
pub fn proximal_level(dataset: DatasetKind) -> Result<TaxonomyLevel, TaxonomyError> {
    dataset.proximal_level()
}

/// A clarification question prefix paired with its answer prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixTemplate {
    pub id: String,
    pub question_prefix: String,
    pub answer_prefix: String,
    pub level: TaxonomyLevel,
    pub dataset: DatasetKind,
}

impl PrefixTemplate {
    pub fn has_name_placeholder(&self) -> bool {
        self.question_prefix.contains(NAME_PLACEHOLDER)
            || self.answer_prefix.contains(NAME_PLACEHOLDER)
    }
}

/// Replaces `[NAME]` in both prefixes with the person named in the
/// instance's context. `_` is left for span substitution.
pub fn substitute_placeholders(
    template: &PrefixTemplate,
    instance: &QaInstance,
) -> Result<(String, String), TaxonomyError> {
    if !template.has_name_placeholder() {
        return Ok((
            template.question_prefix.clone(),
            template.answer_prefix.clone(),
        ));
    }
    let name = extract_name(&instance.prompt).ok_or(TaxonomyError::NameNotFound)?;
    Ok((
        template.question_prefix.replace(NAME_PLACEHOLDER, &name),
        template.answer_prefix.replace(NAME_PLACEHOLDER, &name),
    ))
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    block: Vec<BlockRecord>,
}

#[derive(Debug, Deserialize)]
struct BlockRecord {
    id: String,
    datasets: Vec<DatasetKind>,
    template: Vec<TemplateRecord>,
}

#[derive(Debug, Deserialize)]
struct TemplateRecord {
    question: String,
    answer: String,
    level: i64,
}

#[derive(Debug, Clone)]
struct Block {
    datasets: Vec<DatasetKind>,
    templates: Vec<(String, String, String, TaxonomyLevel)>,
}

/// Immutable set of prefix templates for every dataset.
#[derive(Debug, Clone)]
pub struct PrefixRegistry {
    blocks: Vec<Block>,
}

impl PrefixRegistry {
    /// The registry shipped with the crate.
    pub fn bundled() -> &'static PrefixRegistry {
        static BUNDLED: OnceLock<PrefixRegistry> = OnceLock::new();
        BUNDLED.get_or_init(|| {
            PrefixRegistry::from_toml_str(BUNDLED_REGISTRY).expect("bundled registry is valid")
        })
    }

    pub fn bundled_source() -> &'static str {
        BUNDLED_REGISTRY
    }

    pub fn load(path: &Path) -> Result<PrefixRegistry, RegistryError> {
        let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<PrefixRegistry, RegistryError> {
        let file: RegistryFile = toml::from_str(text)?;
        let mut blocks = Vec::with_capacity(file.block.len());
        let mut seen_ids = BTreeSet::new();
        for block in file.block {
            let mut templates = Vec::with_capacity(block.template.len());
            for record in block.template {
                let question = record.question.trim().to_string();
                let answer = record.answer.trim().to_string();
                let id = format!("{}/{}", block.id, slug(&question));
                if question.is_empty() {
                    return Err(invalid(&id, "question prefix is empty"));
                }
                if question.contains(NAME_PLACEHOLDER) && !answer.contains(NAME_PLACEHOLDER) {
                    return Err(invalid(&id, "question uses [NAME] but answer does not"));
                }
                let level = TaxonomyLevel::new(record.level)?;
                if !seen_ids.insert(id.clone()) {
                    return Err(invalid(&id, "duplicate template id"));
                }
                templates.push((id, question, answer, level));
            }
            blocks.push(Block {
                datasets: block.datasets,
                templates,
            });
        }
        let registry = PrefixRegistry { blocks };
        for dataset in DatasetKind::ALL {
            let templates = registry.prefixes_for(dataset);
            if templates.is_empty() {
                return Err(RegistryError::MissingDataset(dataset));
            }
            let level = dataset.proximal_level()?;
            if !templates.iter().any(|t| t.level == level) {
                return Err(RegistryError::MissingProximal { dataset, level });
            }
        }
        Ok(registry)
    }

    /// All templates serving `dataset`, in file order.
    pub fn prefixes_for(&self, dataset: DatasetKind) -> Vec<PrefixTemplate> {
        self.blocks
            .iter()
            .filter(|b| b.datasets.contains(&dataset))
            .flat_map(|b| b.templates.iter())
            .map(|(id, question, answer, level)| PrefixTemplate {
                id: id.clone(),
                question_prefix: question.clone(),
                answer_prefix: answer.clone(),
                level: *level,
                dataset,
            })
            .collect()
    }
}

/// Templates from the bundled registry.
pub fn prefixes_for(dataset: DatasetKind) -> Vec<PrefixTemplate> {
    PrefixRegistry::bundled().prefixes_for(dataset)
}

fn invalid(id: &str, reason: &str) -> RegistryError {
    RegistryError::InvalidTemplate {
        id: id.to_string(),
        reason: reason.to_string(),
    }
}

fn slug(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}
