use std::time::Duration;

use serde_json::{json, Value};

use super::{count_tokens, CompletionRequest, CompletionResult, LlmBackend};
use crate::error::{Error, Result};

/// Environment variable holding the bearer token for [`HttpLlm`].
pub const LLM_KEY_ENV: &str = "SURVEYG_LLM_KEY";

/// OpenAI-style `POST {base_url}/chat/completions` backend.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpLlm {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: std::env::var(LLM_KEY_ENV).ok(),
            agent,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }
}

impl LlmBackend for HttpLlm {
    fn name(&self) -> &str {
        "http"
    }

    fn call(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "seed": request.seed,
        });
        let mut req = self
            .agent
            .post(format!("{}/chat/completions", self.base_url));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::transport(format!("HTTP {}", status.as_u16())));
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::transport(format!("bad response body: {e}")))?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        if text.trim().is_empty() {
            return Err(Error::transport("empty completion"));
        }
        let input_tokens = value["usage"]["prompt_tokens"]
            .as_u64()
            .unwrap_or_else(|| count_tokens(&request.text));
        let output_tokens = value["usage"]["completion_tokens"]
            .as_u64()
            .unwrap_or_else(|| count_tokens(&text));
        Ok(CompletionResult {
            text,
            input_tokens,
            output_tokens,
            backend: format!("http:{}", self.model),
            truncated: false,
        })
    }
}
