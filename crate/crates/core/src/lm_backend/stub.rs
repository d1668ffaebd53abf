use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{truncate_completion, Backend, BackendError, GenParams, ScoreSource, ScoreValue};

const VOCABULARY: &[&str] = &[
    "the", "a", "water", "car", "house", "friend", "tire", "store", "went", "made", "good", "old",
    "new", "room", "light", "door", "dog", "food", "work", "school", "paper", "money", "time",
    "rain", "plant", "game", "street", "phone", "book", "coffee", "party", "day",
];

/// Explicit completions and scores for table mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StubTable {
    /// Prompt to completions; sample `i` reads entry `i`, missing entries are
    /// empty.
    #[serde(default)]
    pub generations: BTreeMap<String, Vec<String>>,
    /// Candidate text to score.
    #[serde(default)]
    pub scores: BTreeMap<String, TableScore>,
    /// When set, prompts and texts absent from the table fall back to
    /// seeded-hash behaviour with this seed. Otherwise missing scores are an
    /// error and missing generations are empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_seed: Option<u64>,
}

/// A bare number is a total log-probability over one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TableScore {
    Value(f64),
    Full { total: f64, tokens: usize },
}

impl TableScore {
    fn to_score(self) -> ScoreValue {
        match self {
            Self::Value(v) => ScoreValue::new(v, 1, ScoreSource::FullText),
            Self::Full { total, tokens } => ScoreValue::new(total, tokens, ScoreSource::FullText),
        }
    }
}

impl StubTable {
    pub fn load(path: &Path) -> Result<StubTable, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::InvalidParams(format!("cannot read stub table {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            BackendError::InvalidParams(format!("cannot parse stub table {}: {e}", path.display()))
        })
    }

    fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("table serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[derive(Debug, Clone)]
enum Mode {
    Hashed,
    Table(StubTable),
}

/// Deterministic offline backend.
///
/// In hashed mode every output is a pure function of the input text, the
/// request parameters and the stub seed. In table mode outputs come from a
/// [`StubTable`].
#[derive(Debug, Clone)]
pub struct StubBackend {
    seed: u64,
    mode: Mode,
}

impl StubBackend {
    pub fn hashed(seed: u64) -> Self {
        Self {
            seed,
            mode: Mode::Hashed,
        }
    }

    pub fn table(table: StubTable) -> Self {
        Self {
            seed: table.fallback_seed.unwrap_or(0),
            mode: Mode::Table(table),
        }
    }

    fn hashed_generate(&self, prompt: &str, params: &GenParams) -> Vec<String> {
        let params_key = serde_json::to_string(params).expect("params serialize");
        (0..params.num_samples)
            .map(|sample| {
                let limit = params.budget.limit();
                if limit == 0 {
                    return String::new();
                }
                let h = hash64(&[
                    b"generate",
                    prompt.as_bytes(),
                    params_key.as_bytes(),
                    &self.seed.to_le_bytes(),
                    &(sample as u64).to_le_bytes(),
                ]);
                let words = 1 + (h % limit as u64) as usize;
                let mut text = (0..words)
                    .map(|w| {
                        let wh = hash64(&[&h.to_le_bytes(), &(w as u64).to_le_bytes()]);
                        VOCABULARY[(wh % VOCABULARY.len() as u64) as usize]
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                if let Some(stop) = params.stop_at {
                    if !(h >> 32).is_multiple_of(4) {
                        text.push(stop);
                    }
                }
                text
            })
            .collect()
    }

    fn hashed_score(&self, text: &str) -> ScoreValue {
        let h = hash64(&[b"score", text.as_bytes(), &self.seed.to_le_bytes()]);
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        // unit is in [0, 1), so the per-token score lies in [-10, 0).
        let per_token = -10.0 * (1.0 - unit);
        let tokens = text.split_whitespace().count().max(1);
        ScoreValue::new(per_token * tokens as f64, tokens, ScoreSource::FullText)
    }
}

impl Backend for StubBackend {
    fn id(&self) -> String {
        match &self.mode {
            Mode::Hashed => format!("stub-hash:{}", self.seed),
            Mode::Table(table) => format!("stub-table:{}", table.digest()),
        }
    }

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<Vec<String>, BackendError> {
        params.validate()?;
        let raw = match &self.mode {
            Mode::Hashed => self.hashed_generate(prompt, params),
            Mode::Table(table) => match table.generations.get(prompt) {
                Some(entries) => (0..params.num_samples)
                    .map(|i| entries.get(i).cloned().unwrap_or_default())
                    .collect(),
                None if table.fallback_seed.is_some() => self.hashed_generate(prompt, params),
                None => vec![String::new(); params.num_samples],
            },
        };
        Ok(raw.iter().map(|t| truncate_completion(t, params)).collect())
    }

    fn score(&self, text: &str) -> Result<ScoreValue, BackendError> {
        if text.trim().is_empty() {
            return Ok(ScoreValue::empty());
        }
        match &self.mode {
            Mode::Hashed => Ok(self.hashed_score(text)),
            Mode::Table(table) => match table.scores.get(text) {
                Some(score) => Ok(score.to_score()),
                None if table.fallback_seed.is_some() => Ok(self.hashed_score(text)),
                None => Err(BackendError::MissingTableEntry(text.to_string())),
            },
        }
    }
}

fn hash64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
