use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub const LLM_URL_ENV: &str = "GOA_LLM_URL";
pub const LLM_KEY_ENV: &str = "GOA_LLM_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("scripted backend refused: {0}")]
    Scripted(String),
    #[error("http transport: {0}")]
    Transport(String),
    #[error("malformed completion: {0}")]
    Response(String),
    #[error("backend not configured (set {LLM_URL_ENV})")]
    NotConfigured,
}

/// Provider-reported token usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<Usage>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
        }
    }
}

pub type ScriptedFn = dyn Fn(&str, &str) -> Result<BackendReply, BackendError> + Send + Sync;

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub url: String,
    pub model: String,
    pub key: Option<String>,
    pub temperature: f64,
    pub timeout: Duration,
    pub retries: u32,
}

impl HttpConfig {
    pub fn from_env(model: impl Into<String>) -> Result<Self, BackendError> {
        let url = std::env::var(LLM_URL_ENV).map_err(|_| BackendError::NotConfigured)?;
        Ok(Self {
            url,
            model: model.into(),
            key: std::env::var(LLM_KEY_ENV).ok(),
            temperature: 0.0,
            timeout: Duration::from_secs(120),
            retries: 2,
        })
    }
}

#[derive(Clone)]
pub enum AgentBackend {
    /// Deterministic `(role, prompt) -> reply` function.
    Scripted(Arc<ScriptedFn>),
    Http(HttpConfig),
}

impl fmt::Debug for AgentBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentBackend::Scripted(_) => f.write_str("Scripted(..)"),
            AgentBackend::Http(c) => f.debug_tuple("Http").field(&c.url).field(&c.model).finish(),
        }
    }
}

impl AgentBackend {
    pub fn scripted<F>(f: F) -> Self
    where
        F: Fn(&str, &str) -> String + Send + Sync + 'static,
    {
        AgentBackend::Scripted(Arc::new(move |role: &str, prompt: &str| Ok(BackendReply::text(f(role, prompt)))))
    }

    /// Replies with the prompt itself.
    pub fn echo() -> Self {
        Self::scripted(|_, prompt| prompt.to_string())
    }

    pub fn call(&self, role: &str, prompt: &str) -> Result<BackendReply, BackendError> {
        match self {
            AgentBackend::Scripted(f) => f(role, prompt),
            AgentBackend::Http(cfg) => http_call(cfg, prompt),
        }
    }
}

fn http_call(cfg: &HttpConfig, prompt: &str) -> Result<BackendReply, BackendError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .build()
        .into();
    let body = json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
    });
    let mut last = BackendError::Transport("no attempt made".into());
    for _ in 0..=cfg.retries {
        let mut req = agent.post(&cfg.url);
        if let Some(key) = &cfg.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(&body) {
            Ok(mut resp) => {
                let v: serde_json::Value = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| BackendError::Response(e.to_string()))?;
                return parse_completion(&v);
            }
            Err(e) => last = BackendError::Transport(e.to_string()),
        }
    }
    Err(last)
}

/// Reads `choices[0].message.content` and the optional `usage` block of a
/// chat-completion response.
pub fn parse_completion(v: &serde_json::Value) -> Result<BackendReply, BackendError> {
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| BackendError::Response("missing choices[0].message.content".into()))?;
    let usage = match (
        v.pointer("/usage/prompt_tokens").and_then(|x| x.as_u64()),
        v.pointer("/usage/completion_tokens").and_then(|x| x.as_u64()),
    ) {
        (Some(prompt), Some(completion)) => Some(Usage { prompt, completion }),
        _ => None,
    };
    Ok(BackendReply {
        text: text.to_string(),
        usage,
    })
}
