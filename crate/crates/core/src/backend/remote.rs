use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{prompt_width, Backend, BackendHandle, BackendKind, SamplingParams, TrainingParams};
use crate::codec::PromptTemplate;
use crate::error::{invalid, Error, Result};

/// HTTP client for the fine-tune/generate service.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    base_url: String,
    agent: Agent,
    max_attempts: u32,
    backoff: Duration,
}

#[derive(Serialize)]
struct FinetuneRequest<'a> {
    prompts: &'a [String],
    hyperparams: &'a TrainingParams,
}

#[derive(Deserialize)]
struct FinetuneReply {
    model_id: String,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model_id: &'a str,
    prompts: &'a [String],
    temperature: f64,
    max_new_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct GenerateReply {
    completions: Vec<String>,
}

#[derive(Deserialize)]
struct HealthReply {
    status: String,
}

#[derive(Deserialize)]
struct ErrorReply {
    error: String,
}

enum Attempt<T> {
    Done(Result<T>),
    Retry(String),
}

impl RemoteBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_timeout(base_url, Duration::from_secs(3600))
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            max_attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }

    /// Transport failures and 5xx replies are retried up to `max_attempts`
    /// times in total, sleeping `backoff * attempt` in between.
    pub fn with_retries(mut self, max_attempts: u32, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn health(&self) -> Result<()> {
        let reply: HealthReply = self.request("/v1/health", None::<&()>)?;
        if reply.status != "ok" {
            return Err(Error::Remote(format!("service status '{}'", reply.status)));
        }
        Ok(())
    }

    fn request<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&B>,
    ) -> Result<R> {
        let url = format!("{}{}", self.base_url, path);
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.attempt(&url, body) {
                Attempt::Done(r) => return r,
                Attempt::Retry(msg) => {
                    log::warn!(
                        "{url}: attempt {attempt}/{} failed: {msg}",
                        self.max_attempts
                    );
                    last = msg;
                }
            }
            if attempt < self.max_attempts {
                thread::sleep(self.backoff * attempt);
            }
        }
        Err(Error::Transport {
            attempts: self.max_attempts,
            message: last,
        })
    }

    fn attempt<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        body: Option<&B>,
    ) -> Attempt<R> {
        let sent = match body {
            Some(b) => self.agent.post(url).send_json(b),
            None => self.agent.get(url).call(),
        };
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading reply: {e}")),
        };
        if status >= 500 {
            return Attempt::Retry(format!("HTTP {status}: {}", error_message(&text)));
        }
        if status >= 400 {
            return Attempt::Done(Err(Error::Remote(format!(
                "HTTP {status}: {}",
                error_message(&text)
            ))));
        }
        Attempt::Done(
            serde_json::from_str(&text)
                .map_err(|e| Error::Remote(format!("malformed reply from {url}: {e}"))),
        )
    }
}

fn error_message(text: &str) -> String {
    serde_json::from_str::<ErrorReply>(text)
        .map(|e| e.error)
        .unwrap_or_else(|_| text.chars().take(200).collect())
}

impl Backend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn fine_tune(&mut self, prompts: &[String], hyper: &TrainingParams) -> Result<BackendHandle> {
        if prompts.is_empty() {
            return invalid("empty fine-tuning corpus");
        }
        let reply: FinetuneReply = self.request(
            "/v1/finetune",
            Some(&FinetuneRequest {
                prompts,
                hyperparams: hyper,
            }),
        )?;
        Ok(BackendHandle {
            kind: BackendKind::Remote,
            model_id: reply.model_id,
            fitted: true,
        })
    }

    fn generate(
        &self,
        handle: &BackendHandle,
        prompts: &[String],
        params: &SamplingParams,
    ) -> Result<Vec<String>> {
        handle.ensure_fitted(BackendKind::Remote)?;
        params.validate()?;
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let k = prompt_width(&prompts[0], &PromptTemplate::default()).unwrap_or(1);
        let reply: GenerateReply = self.request(
            "/v1/generate",
            Some(&GenerateRequest {
                model_id: &handle.model_id,
                prompts,
                temperature: params.temperature,
                max_new_tokens: params.max_new_tokens_for(k),
                seed: params.seed,
            }),
        )?;
        if reply.completions.len() != prompts.len() {
            return Err(Error::Remote(format!(
                "malformed reply: {} completions for {} prompts",
                reply.completions.len(),
                prompts.len()
            )));
        }
        Ok(reply.completions)
    }
}
