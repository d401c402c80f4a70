//! Minimal chat-completions client: one wire shape shared by the judge and
//! the annotation pipeline, with a deterministic offline mock backend.
//!
//! Wire shape: POST JSON `{"model": ..., "messages": [{"role", "content"}]}`
//! to `<base_url>/chat/completions`; the reply's first choice's message
//! content is the completion. The API key comes from an environment
//! variable and is never logged.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default environment variable holding the API key for HTTP backends.
pub const API_KEY_ENV: &str = "MOTIONLM_API_KEY";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("api key environment variable '{0}' is not set")]
    MissingKey(String),
    #[error("http error: {0}")]
    Http(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response missing choices[0].message.content: {0}")]
    BadResponse(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A deterministic offline stand-in: the first rule whose pattern occurs in
/// the last user message wins; otherwise the last user message is echoed.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MockRules {
    pub rules: Vec<(String, String)>,
}

impl MockRules {
    pub fn load(path: &std::path::Path) -> Result<Self, ChatError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn reply(&self, messages: &[ChatMessage]) -> String {
        let last_user = messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        for (pattern, response) in &self.rules {
            if last_user.contains(pattern.as_str()) {
                return response.clone();
            }
        }
        last_user.to_string()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ChatBackend {
    Mock(MockRules),
    Http {
        base_url: String,
        model: String,
        /// Environment variable the key is read from.
        api_key_env: String,
        timeout_secs: u64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChatClient {
    pub backend: ChatBackend,
}

impl ChatClient {
    pub fn mock(rules: MockRules) -> Self {
        ChatClient { backend: ChatBackend::Mock(rules) }
    }

    pub fn http(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        ChatClient {
            backend: ChatBackend::Http {
                base_url: base_url.into(),
                model: model.into(),
                api_key_env: API_KEY_ENV.into(),
                timeout_secs: 30,
            },
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.backend, ChatBackend::Mock(_))
    }

    /// The exact JSON body an HTTP call would send (golden-testable).
    pub fn request_body(&self, messages: &[ChatMessage]) -> String {
        let model = match &self.backend {
            ChatBackend::Http { model, .. } => model.clone(),
            ChatBackend::Mock(_) => "mock".to_string(),
        };
        serde_json::to_string(&ChatRequest { model, messages: messages.to_vec() }).unwrap()
    }

    /// One completion; no retries (callers own their retry policy).
    pub fn complete(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        match &self.backend {
            ChatBackend::Mock(rules) => Ok(rules.reply(messages)),
            ChatBackend::Http { base_url, api_key_env, timeout_secs, .. } => {
                let key = std::env::var(api_key_env)
                    .map_err(|_| ChatError::MissingKey(api_key_env.clone()))?;
                let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(*timeout_secs))
                    .build()
                    .map_err(|e| ChatError::Http(e.to_string()))?;
                let resp = client
                    .post(url)
                    .bearer_auth(key)
                    .header("content-type", "application/json")
                    .body(self.request_body(messages))
                    .send()
                    .map_err(|e| ChatError::Http(e.to_string()))?;
                let status = resp.status().as_u16();
                let body = resp.text().map_err(|e| ChatError::Http(e.to_string()))?;
                if !(200..300).contains(&status) {
                    return Err(ChatError::Status { status, body });
                }
                extract_content(&body)
            }
        }
    }

    /// Completion with `attempts` tries and exponential backoff starting at
    /// `base_delay`. Mock backends never retry (they cannot fail).
    pub fn complete_with_retry(
        &self,
        messages: &[ChatMessage],
        attempts: usize,
        base_delay: Duration,
    ) -> Result<String, ChatError> {
        let mut last = None;
        for attempt in 0..attempts.max(1) {
            match self.complete(messages) {
                Ok(s) => return Ok(s),
                Err(e @ ChatError::MissingKey(_)) => return Err(e),
                Err(e) => last = Some(e),
            }
            if attempt + 1 < attempts {
                std::thread::sleep(base_delay * 2u32.pow(attempt as u32));
            }
        }
        Err(last.unwrap())
    }
}

fn extract_content(body: &str) -> Result<String, ChatError> {
    let v: serde_json::Value = serde_json::from_str(body)
        .map_err(|_| ChatError::BadResponse(body.chars().take(200).collect()))?;
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(|s| s.to_string())
        .ok_or_else(|| ChatError::BadResponse(body.chars().take(200).collect()))
}
