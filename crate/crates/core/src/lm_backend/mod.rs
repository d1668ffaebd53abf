//! Generator/scorer interface and its implementations.
//!
//! Everything downstream talks to a [`Backend`]: `generate` samples
//! continuations, `score` returns the log-probability of a text. The
//! [`StubBackend`] is deterministic and offline; [`HttpBackend`] talks to an
//! OpenAI-compatible completions endpoint.

mod http;
mod log;
mod stub;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::http::{HttpBackend, HttpConfig, HttpScoring};
pub use self::log::{BackendRequestRecord, LoggedBackend, RequestKind, RequestLog};
pub use self::stub::{StubBackend, StubTable, TableScore};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("backend returned no token log-probabilities for `{0}`")]
    TokenizationFailure(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("stub table has no entry for `{0}`")]
    MissingTableEntry(String),
    #[error("unexpected backend response: {0}")]
    Protocol(String),
}

/// How long a completion may be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthBudget {
    /// Whitespace-separated words added after the prompt.
    Words(usize),
    /// Backend tokens; the stub treats whitespace tokens as tokens.
    Tokens(usize),
}

impl LengthBudget {
    pub fn limit(self) -> usize {
        match self {
            Self::Words(n) | Self::Tokens(n) => n,
        }
    }
}

/// Sampling parameters for one generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub nucleus_p: f64,
    pub budget: LengthBudget,
    pub num_samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at: Option<char>,
    /// Left unset unless configured; the backend default applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl GenParams {
    /// Clarification question sampling: p=0.2, five samples, at most six
    /// added words, cut at the first `?`.
    pub fn clarification_questions() -> Self {
        Self {
            nucleus_p: 0.2,
            budget: LengthBudget::Words(6),
            num_samples: 5,
            seed: 0,
            stop_at: Some('?'),
            temperature: None,
        }
    }

    /// Clarification answer sampling: p=0.5, ten samples, at most ten tokens.
    pub fn clarification_answers() -> Self {
        Self {
            nucleus_p: 0.5,
            budget: LengthBudget::Tokens(10),
            num_samples: 10,
            seed: 0,
            stop_at: None,
            temperature: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(BackendError::InvalidParams(format!(
                "nucleus_p must be in (0, 1], got {}",
                self.nucleus_p
            )));
        }
        if self.num_samples == 0 {
            return Err(BackendError::InvalidParams("num_samples must be >= 1".into()));
        }
        if let Some(t) = self.temperature {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(BackendError::InvalidParams(format!(
                    "temperature must be finite and >= 0, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Which part of the candidate text a score covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    FullText,
    /// Only the continuation, conditioned on the context.
    Continuation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreValue {
    pub total_logprob: f64,
    pub token_count: usize,
    pub normalized: f64,
    #[serde(default)]
    pub source: ScoreSource,
}

impl ScoreValue {
    pub fn new(total_logprob: f64, token_count: usize, source: ScoreSource) -> Self {
        let token_count = token_count.max(1);
        Self {
            total_logprob,
            token_count,
            normalized: total_logprob / token_count as f64,
            source,
        }
    }

    /// Score of the empty text.
    pub fn empty() -> Self {
        Self::new(0.0, 1, ScoreSource::FullText)
    }

    pub fn get(&self, mode: ScoreMode) -> f64 {
        match mode {
            ScoreMode::Normalized => self.normalized,
            ScoreMode::Sum => self.total_logprob,
        }
    }
}

/// Which [`ScoreValue`] field selection compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Normalized,
    Sum,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Sum => "sum",
        })
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "sum" => Ok(Self::Sum),
            other => Err(format!("unknown score mode `{other}`")),
        }
    }
}

/// A language model that can sample continuations and score text.
///
/// Implementations must be safe to call from many threads at once.
pub trait Backend: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> String;

    /// Returns exactly `params.num_samples` completions of `prompt`, each
    /// already cut to the budget and stop character.
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<Vec<String>, BackendError>;

    /// Log-probability of `text`. Empty text scores zero without a request.
    fn score(&self, text: &str) -> Result<ScoreValue, BackendError>;

    /// Log-probability of `continuation` following `context`. Defaults to
    /// scoring the joined text.
    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<ScoreValue, BackendError> {
        self.score(&join_text(&[context, continuation]))
    }
}

macro_rules! forward_backend {
    ($ptr:ident) => {
        impl<B: Backend + ?Sized> Backend for $ptr<B> {
            fn id(&self) -> String {
                (**self).id()
            }

            fn generate(&self, prompt: &str, params: &GenParams) -> Result<Vec<String>, BackendError> {
                (**self).generate(prompt, params)
            }

            fn score(&self, text: &str) -> Result<ScoreValue, BackendError> {
                (**self).score(text)
            }

            fn score_continuation(
                &self,
                context: &str,
                continuation: &str,
            ) -> Result<ScoreValue, BackendError> {
                (**self).score_continuation(context, continuation)
            }
        }
    };
}

forward_backend!(Arc);
forward_backend!(Box);

/// Joins non-empty parts with single spaces.
pub fn join_text(parts: &[&str]) -> String {
    let mut out = String::new();
    for part in parts.iter().map(|p| p.trim()).filter(|p| !p.is_empty()) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(part);
    }
    out
}

/// Applies the word budget and stop character to a raw completion.
///
/// A word budget keeps the first `n` whitespace-separated words. The text is
/// then cut just after the first stop character, if any survives.
pub fn truncate_completion(raw: &str, params: &GenParams) -> String {
    let mut text = match params.budget {
        LengthBudget::Words(n) => raw.split_whitespace().take(n).collect::<Vec<_>>().join(" "),
        LengthBudget::Tokens(_) => raw.trim().to_string(),
    };
    if let Some(stop) = params.stop_at {
        if let Some(pos) = text.find(stop) {
            text.truncate(pos + stop.len_utf8());
        }
    }
    text
}
