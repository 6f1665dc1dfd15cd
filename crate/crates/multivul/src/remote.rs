//! Chat-completions client for the critique protocol, and comment
//! attachment over either provider.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use multivul_core::commenter::{
    merge_comments, run_critique, AttachOutcome, ChatBackend, ChatMessage, CommentError,
    CommentGenerator, CritiqueTranscript, StubGenerator, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};
use multivul_core::corpus::FunctionRecord;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOKEN_ENV: &str = "MULTIVUL_API_TOKEN";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    #[default]
    Stub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub concurrency: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Stub,
            endpoint: None,
            model: None,
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_base_ms: 1000,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            concurrency: 1,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == ProviderMode::Remote && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(Error::Config(
                "remote mode needs both an endpoint and a model".into(),
            ));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: Option<String>,
}

pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    token: Option<String>,
    max_retries: u32,
    backoff: Duration,
    temperature: f64,
    max_tokens: u32,
}

impl HttpChatBackend {
    pub fn new(config: &ProviderConfig) -> Result<Self> {
        config.validate()?;
        let (Some(endpoint), Some(model)) = (&config.endpoint, &config.model) else {
            return Err(Error::Config(
                "remote mode needs both an endpoint and a model".into(),
            ));
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            endpoint: endpoint.clone(),
            model: model.clone(),
            token: std::env::var(&config.token_env)
                .ok()
                .filter(|t| !t.is_empty()),
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.backoff_base_ms),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        })
    }

    fn attempt(
        &self,
        messages: &[ChatMessage],
    ) -> std::result::Result<String, (Option<u16>, String, bool)> {
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| (None, e.to_string(), true))?;
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            let text = resp.text().unwrap_or_default();
            return Err((Some(status.as_u16()), text, retryable));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| {
            (
                Some(status.as_u16()),
                format!("bad response body: {e}"),
                false,
            )
        })?;
        Ok(parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }
}

impl ChatBackend for HttpChatBackend {
    /// Retries transport errors, 429 and 5xx with exponential backoff.
    fn complete(&self, messages: &[ChatMessage]) -> std::result::Result<String, CommentError> {
        let mut delay = self.backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(messages) {
                Ok(text) => return Ok(text),
                Err((status, message, retryable)) => {
                    if !retryable || attempts > self.max_retries {
                        return Err(CommentError::Remote {
                            attempts,
                            status,
                            message,
                        });
                    }
                }
            }
            thread::sleep(delay);
            delay *= 2;
        }
    }
}

pub fn generate_comment_llm(
    record: &FunctionRecord,
    config: &ProviderConfig,
) -> Result<CritiqueTranscript> {
    if record.code.trim().is_empty() {
        return Err(CommentError::EmptyCode(record.id.clone()).into());
    }
    let backend = HttpChatBackend::new(config)?;
    Ok(run_critique(&backend, &record.code)?)
}

/// Fills missing comments through the configured provider. Remote requests
/// run on up to `concurrency` threads; results keep input order.
pub fn attach_comments_with(
    records: &[FunctionRecord],
    config: &ProviderConfig,
) -> Result<AttachOutcome> {
    config.validate()?;
    match config.mode {
        ProviderMode::Stub => Ok(multivul_core::commenter::attach_comments(
            records,
            &StubGenerator,
        )?),
        ProviderMode::Remote => {
            let backend = HttpChatBackend::new(config)?;
            let pending: Vec<usize> = (0..records.len())
                .filter(|&i| records[i].comment.is_none())
                .collect();
            let slots: Vec<OnceLock<std::result::Result<String, CommentError>>> =
                records.iter().map(|_| OnceLock::new()).collect();
            let next = AtomicUsize::new(0);
            thread::scope(|s| {
                for _ in 0..config.concurrency.min(pending.len().max(1)) {
                    s.spawn(|| loop {
                        let k = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&i) = pending.get(k) else { break };
                        let result = backend.generate(&records[i]);
                        let _ = slots[i].set(result);
                    });
                }
            });
            let results = slots.into_iter().map(OnceLock::into_inner).collect();
            Ok(merge_comments(records, results)?)
        }
    }
}
