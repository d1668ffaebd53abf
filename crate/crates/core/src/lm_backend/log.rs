use std::io::Write;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, GenParams, ScoreValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Generate,
    Score,
}

/// One request that reached a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequestRecord {
    pub sequence: u64,
    pub kind: RequestKind,
    pub prompt: String,
    pub params: Option<GenParams>,
    pub timestamp_ms: u64,
    pub response_digest: String,
}

/// Append-only, thread-safe request log.
#[derive(Debug, Default)]
pub struct RequestLog {
    records: Mutex<Vec<BackendRequestRecord>>,
}

impl RequestLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(
        &self,
        kind: RequestKind,
        prompt: &str,
        params: Option<&GenParams>,
        response_digest: String,
    ) {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or_default();
        let mut records = self.records.lock().expect("request log poisoned");
        let sequence = records.len() as u64;
        records.push(BackendRequestRecord {
            sequence,
            kind,
            prompt: prompt.to_string(),
            params: params.cloned(),
            timestamp_ms,
            response_digest,
        });
    }

    pub fn records(&self) -> Vec<BackendRequestRecord> {
        self.records.lock().expect("request log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("request log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records without sequence numbers or timestamps, sorted, one JSON
    /// document per line. Concurrent runs over the same inputs yield the same
    /// bytes.
    pub fn canonical_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .records()
            .into_iter()
            .map(|r| {
                serde_json::json!({
                    "kind": r.kind,
                    "prompt": r.prompt,
                    "params": r.params,
                    "response_digest": r.response_digest,
                })
                .to_string()
            })
            .collect();
        lines.sort();
        lines
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for record in self.records() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub(crate) fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("response serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Records every request that reaches `inner`.
pub struct LoggedBackend<B> {
    inner: B,
    log: std::sync::Arc<RequestLog>,
}

impl<B: Backend> LoggedBackend<B> {
    pub fn new(inner: B, log: std::sync::Arc<RequestLog>) -> Self {
        Self { inner, log }
    }

    pub fn log(&self) -> &RequestLog {
        &self.log
    }
}

impl<B: Backend> Backend for LoggedBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<Vec<String>, BackendError> {
        let out = self.inner.generate(prompt, params)?;
        self.log
            .append(RequestKind::Generate, prompt, Some(params), digest_json(&out));
        Ok(out)
    }

    fn score(&self, text: &str) -> Result<ScoreValue, BackendError> {
        let out = self.inner.score(text)?;
        self.log.append(RequestKind::Score, text, None, digest_json(&out));
        Ok(out)
    }

    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<ScoreValue, BackendError> {
        let out = self.inner.score_continuation(context, continuation)?;
        let text = super::join_text(&[context, continuation]);
        self.log.append(RequestKind::Score, &text, None, digest_json(&out));
        Ok(out)
    }
}
