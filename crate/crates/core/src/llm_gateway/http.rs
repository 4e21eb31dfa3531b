use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, Provider, ProviderError};
use crate::error::ConfigError;

/// Connection settings for an OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpProviderConfig {
    pub name: String,
    pub base_url: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub timeout: Duration,
}

impl HttpProviderConfig {
    /// Built-in endpoints: `openai` (OPENAI_API_KEY) and `deepseek` (DEEPSEEK_API_KEY).
    pub fn preset(name: &str) -> Option<Self> {
        let (base_url, api_key_env) = match name {
            "openai" => ("https://api.openai.com/v1", "OPENAI_API_KEY"),
            "deepseek" => ("https://api.deepseek.com/v1", "DEEPSEEK_API_KEY"),
            _ => return None,
        };
        Some(HttpProviderConfig {
            name: name.to_string(),
            base_url: base_url.to_string(),
            api_key_env: api_key_env.to_string(),
            timeout: Duration::from_secs(120),
        })
    }

    /// Any compatible server; the key is read from `<NAME>_API_KEY`.
    pub fn custom(name: &str, base_url: &str) -> Self {
        HttpProviderConfig {
            name: name.to_string(),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key_env: format!("{}_API_KEY", name.to_ascii_uppercase().replace('-', "_")),
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct HttpChatProvider {
    config: HttpProviderConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    content: Option<String>,
}

impl HttpChatProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, ConfigError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            ConfigError::Invalid(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ConfigError::Invalid(format!("http client: {e}")))?;
        Ok(HttpChatProvider { config, api_key, client })
    }

    pub fn chat_body(request: &CompletionRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(ChatMessage { role: "system", content: system });
        }
        messages.push(ChatMessage { role: "user", content: &request.user });
        serde_json::to_value(ChatBody {
            model: &request.model,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        })
        .expect("chat body serializes")
    }

    /// Extracts the first choice's message content from a response body.
    pub fn parse_reply(body: &str) -> Result<String, ProviderError> {
        let reply: ChatReply = serde_json::from_str(body)
            .map_err(|e| ProviderError::Transient { status: None, message: format!("unreadable reply: {e}") })?;
        reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Transient { status: None, message: "reply has no choices".into() })
    }
}

fn is_transient(status: u16) -> bool {
    status == 408 || status == 409 || status == 429 || status >= 500
}

impl Provider for HttpChatProvider {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let url = format!("{}/chat/completions", self.config.base_url);
        let response = self
            .client
            .post(url)
            .bearer_auth(&self.api_key)
            .json(&Self::chat_body(request))
            .send()
            .map_err(|e| ProviderError::Transient { status: None, message: e.to_string() })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| ProviderError::Transient { status: Some(status), message: e.to_string() })?;
        if !(200..300).contains(&status) {
            let message: String = body.chars().take(300).collect();
            return Err(if is_transient(status) {
                ProviderError::Transient { status: Some(status), message }
            } else {
                ProviderError::Fatal { status: Some(status), message }
            });
        }
        Self::parse_reply(&body)
    }
}
