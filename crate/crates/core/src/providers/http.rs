//! HTTP clients for external model services.
//!
//! Embedding endpoints take `{"texts": [...]}` and answer
//! `{"embeddings": [[...], ...]}`, at most [`EMBED_BATCH`] texts per request.
//! Generation endpoints take `{"prompt": "..."}` and answer `{"text": "..."}`.

use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::corpus::Session;
use crate::error::{Error, Result};

use super::answer::render_generation_prompt;
use super::clue::render_topic_prompt;
use super::temporal::resolve_tokens;
use super::{
    AnswerGenerator, ClueAnnotator, Embedding, ProviderConfig, TemporalEmbedder, TemporalRepr,
    TextEmbedder,
};

pub const EMBED_BATCH: usize = 64;

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Slot<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Slot<'_> {
        let mut used = self.used.lock().expect("limiter poisoned");
        while *used >= self.max {
            used = self.freed.wait(used).expect("limiter poisoned");
        }
        *used += 1;
        Slot(self)
    }
}

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("limiter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpClient {
    endpoint: String,
    client: reqwest::blocking::Client,
    retry_count: u32,
    api_key: Option<String>,
    limiter: Limiter,
}

impl HttpClient {
    pub fn new(
        endpoint: impl Into<String>,
        timeout: Duration,
        retry_count: u32,
        api_key: Option<String>,
        max_in_flight: usize,
    ) -> Result<Self> {
        let endpoint = endpoint.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client for {endpoint}: {e}")))?;
        Ok(HttpClient {
            endpoint,
            client,
            retry_count,
            api_key,
            limiter: Limiter::new(max_in_flight),
        })
    }

    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config("http provider without endpoint".into()))?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("credential variable `{var}` is not set"))
            })?),
            None => None,
        };
        HttpClient::new(
            endpoint,
            Duration::from_millis(cfg.timeout_ms),
            cfg.retry_count,
            api_key,
            cfg.max_in_flight,
        )
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// POSTs `body` as JSON, retrying on any failure up to `retry_count` times.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R> {
        let _slot = self.limiter.acquire();
        let attempts = self.retry_count + 1;
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            match self.try_post(body) {
                Ok(reply) => return Ok(reply),
                Err(message) => {
                    debug!(endpoint = %self.endpoint, attempt, %message, "request failed");
                    last_error = message;
                    if attempt < attempts {
                        std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                    }
                }
            }
        }
        Err(Error::Transport {
            endpoint: self.endpoint.clone(),
            attempts,
            message: last_error,
        })
    }

    fn try_post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> std::result::Result<R, String> {
        let mut request = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            return Err(format!("HTTP status {status}"));
        }
        response
            .json::<R>()
            .map_err(|e| format!("malformed reply: {e}"))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedReply {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
}

pub struct HttpEmbedder {
    client: HttpClient,
    dim: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(client: HttpClient) -> Self {
        HttpEmbedder {
            client,
            dim: OnceLock::new(),
        }
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn fingerprint(&self) -> String {
        format!("http:{}", self.client.endpoint())
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(Error::Argument(format!("cannot embed empty text (index {i})")));
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_BATCH) {
            let reply: EmbedReply = self.client.post_json(&EmbedRequest { texts: chunk })?;
            if reply.embeddings.len() != chunk.len() {
                return Err(Error::Transport {
                    endpoint: self.client.endpoint().to_string(),
                    attempts: 1,
                    message: format!(
                        "sent {} texts, received {} embeddings",
                        chunk.len(),
                        reply.embeddings.len()
                    ),
                });
            }
            for values in reply.embeddings {
                let expected = *self.dim.get_or_init(|| values.len());
                if values.len() != expected {
                    return Err(Error::Config(format!(
                        "{} returned dimension {} after {}",
                        self.client.endpoint(),
                        values.len(),
                        expected
                    )));
                }
                out.push(Embedding::normalized(values)?);
            }
        }
        Ok(out)
    }
}

pub struct HttpAnnotator {
    client: HttpClient,
    template: String,
}

impl HttpAnnotator {
    pub fn new(client: HttpClient, template: String) -> Self {
        HttpAnnotator { client, template }
    }
}

impl ClueAnnotator for HttpAnnotator {
    fn annotate(&self, session: &Session) -> Result<String> {
        if session.utterances.is_empty() {
            return Err(Error::Argument(format!("session `{}` is empty", session.id)));
        }
        let prompt = render_topic_prompt(&self.template, session);
        let reply: GenerateReply = self.client.post_json(&GenerateRequest { prompt: &prompt })?;
        let clue = reply.text.trim().to_string();
        if clue.is_empty() {
            return Err(Error::Transport {
                endpoint: self.client.endpoint().to_string(),
                attempts: 1,
                message: format!("empty clue for session `{}`", session.id),
            });
        }
        Ok(clue)
    }
}

/// Resolves intervals locally and attaches an embedding of the expression
/// text from an embedding endpoint.
pub struct HttpTemporalEmbedder {
    client: HttpClient,
}

impl HttpTemporalEmbedder {
    pub fn new(client: HttpClient) -> Self {
        HttpTemporalEmbedder { client }
    }
}

impl TemporalEmbedder for HttpTemporalEmbedder {
    fn temporal_embed(&self, tokens: &[String], reference: NaiveDate) -> Result<TemporalRepr> {
        let mut repr = resolve_tokens(tokens, reference)?;
        let text = tokens.join(" ");
        let reply: EmbedReply = self.client.post_json(&EmbedRequest { texts: &[&text] })?;
        let values = reply.embeddings.into_iter().next().ok_or_else(|| Error::Transport {
            endpoint: self.client.endpoint().to_string(),
            attempts: 1,
            message: "no temporal embedding returned".into(),
        })?;
        repr.embedding = Some(Embedding::normalized(values)?);
        Ok(repr)
    }
}

pub struct HttpAnswerer {
    client: HttpClient,
    template: String,
    separator: String,
}

impl HttpAnswerer {
    pub fn new(client: HttpClient, template: String, separator: String) -> Self {
        HttpAnswerer {
            client,
            template,
            separator,
        }
    }
}

impl AnswerGenerator for HttpAnswerer {
    fn generate_answer(&self, question: &str, evidence: &[&str]) -> Result<String> {
        if question.trim().is_empty() {
            return Err(Error::Argument("question is empty".into()));
        }
        let prompt = render_generation_prompt(&self.template, question, evidence, &self.separator);
        let reply: GenerateReply = self.client.post_json(&GenerateRequest { prompt: &prompt })?;
        Ok(reply.text)
    }
}
