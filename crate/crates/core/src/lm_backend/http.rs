use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    join_text, truncate_completion, Backend, BackendError, GenParams, LengthBudget, ScoreSource,
    ScoreValue,
};

/// How candidate texts are scored over HTTP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HttpScoring {
    /// Echo the prompt's logprobs and sum over the whole text.
    #[default]
    Echo,
    /// Echo the prompt's logprobs and sum only the continuation's tokens.
    Continuation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Full URL of the completions endpoint, e.g. `http://localhost:8000/v1/completions`.
    pub endpoint: String,
    pub model: String,
    /// Never serialized; read from the environment.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub scoring: HttpScoring,
    pub send_seed: bool,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/completions".into(),
            model: "EleutherAI/gpt-neo-2.7B".into(),
            api_key: None,
            timeout_secs: 60,
            max_in_flight: 4,
            max_attempts: 3,
            backoff_ms: 500,
            scoring: HttpScoring::Echo,
            send_seed: true,
        }
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("semaphore poisoned");
        while *available == 0 {
            available = self.freed.wait(available).expect("semaphore poisoned");
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    echo: Option<bool>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    index: usize,
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

enum Failure {
    Retryable(String),
    Fatal(BackendError),
}

/// Client for an OpenAI-compatible `/v1/completions` endpoint.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Protocol(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            client,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn post(&self, body: &CompletionRequest<'_>) -> Result<CompletionResponse, BackendError> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.post_once(body) {
                Ok(response) => return Ok(response),
                Err(Failure::Fatal(err)) => return Err(err),
                Err(Failure::Retryable(message)) => {
                    tracing::warn!("request to {} failed (attempt {attempt}): {message}", self.config.endpoint);
                    last = message;
                    if attempt < attempts {
                        let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
        Err(BackendError::Unavailable {
            attempts,
            message: last,
        })
    }

    fn post_once(&self, body: &CompletionRequest<'_>) -> Result<CompletionResponse, Failure> {
        let _permit = self.in_flight.acquire();
        let mut request = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Retryable(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::Protocol(format!(
                "HTTP {status}: {text}"
            ))));
        }
        serde_json::from_str(&text).map_err(|e| {
            Failure::Fatal(BackendError::Protocol(format!("bad completion body: {e}")))
        })
    }

    fn echo_logprobs(&self, text: &str) -> Result<Logprobs, BackendError> {
        let body = CompletionRequest {
            model: &self.config.model,
            prompt: text,
            max_tokens: 0,
            top_p: None,
            n: None,
            seed: None,
            temperature: None,
            logprobs: Some(1),
            echo: Some(true),
        };
        let response = self.post(&body)?;
        response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .filter(|l| !l.token_logprobs.is_empty())
            .ok_or_else(|| BackendError::TokenizationFailure(text.to_string()))
    }
}

fn sum_logprobs<'a>(values: impl Iterator<Item = &'a Option<f64>>) -> (f64, usize) {
    values
        .flatten()
        .fold((0.0, 0), |(total, count), lp| (total + lp, count + 1))
}

fn max_tokens_for(budget: LengthBudget) -> usize {
    match budget {
        LengthBudget::Tokens(n) => n,
        // Words are cut client-side; leave room for multi-token words.
        LengthBudget::Words(n) => n * 2 + 2,
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}:{}", self.config.endpoint, self.config.model)
    }

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<Vec<String>, BackendError> {
        params.validate()?;
        if params.budget.limit() == 0 {
            return Ok(vec![String::new(); params.num_samples]);
        }
        let body = CompletionRequest {
            model: &self.config.model,
            prompt,
            max_tokens: max_tokens_for(params.budget),
            top_p: Some(params.nucleus_p),
            n: Some(params.num_samples),
            seed: self.config.send_seed.then_some(params.seed),
            temperature: params.temperature,
            logprobs: None,
            echo: None,
        };
        let mut choices = self.post(&body)?.choices;
        choices.sort_by_key(|c| c.index);
        if choices.len() != params.num_samples {
            tracing::warn!(
                "expected {} completions, got {}",
                params.num_samples,
                choices.len()
            );
        }
        let mut out: Vec<String> = choices
            .iter()
            .take(params.num_samples)
            .map(|c| truncate_completion(&c.text, params))
            .collect();
        out.resize(params.num_samples, String::new());
        Ok(out)
    }

    fn score(&self, text: &str) -> Result<ScoreValue, BackendError> {
        if text.trim().is_empty() {
            return Ok(ScoreValue::empty());
        }
        let logprobs = self.echo_logprobs(text)?;
        let (total, count) = sum_logprobs(logprobs.token_logprobs.iter());
        Ok(ScoreValue::new(total, count, ScoreSource::FullText))
    }

    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<ScoreValue, BackendError> {
        let text = join_text(&[context, continuation]);
        if self.config.scoring == HttpScoring::Echo || context.trim().is_empty() {
            return self.score(&text);
        }
        if text.is_empty() {
            return Ok(ScoreValue::empty());
        }
        let logprobs = self.echo_logprobs(&text)?;
        if logprobs.text_offset.len() != logprobs.token_logprobs.len() {
            return Err(BackendError::TokenizationFailure(text));
        }
        let boundary = context.trim().len();
        let (total, count) = sum_logprobs(
            logprobs
                .token_logprobs
                .iter()
                .zip(&logprobs.text_offset)
                .filter(|(_, offset)| **offset >= boundary)
                .map(|(lp, _)| lp),
        );
        Ok(ScoreValue::new(total, count, ScoreSource::Continuation))
    }
}
