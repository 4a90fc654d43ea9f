use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{estimate_tokens, BackendError, ChatBackend, ChatRequest, ChatResponse, Role, Usage};

const TRANSPORT_RETRIES: u32 = 3;

/// Client for the common chat-completions wire API.
pub struct RemoteBackend {
    id: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    backoff: Duration,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl RemoteBackend {
    /// `api_key` of `None` sends no Authorization header (local servers).
    pub fn new(base_url: &str, model: &str, api_key: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build();
        Self {
            id: format!("remote:{model}"),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            agent: ureq::Agent::new_with_config(config),
            backoff: Duration::from_millis(500),
        }
    }

    /// Reads the key from `key_env`. An empty variable name means no key.
    pub fn from_env(base_url: &str, model: &str, key_env: &str) -> Result<Self, BackendError> {
        if key_env.is_empty() {
            return Ok(Self::new(base_url, model, None));
        }
        let key = std::env::var(key_env)
            .map_err(|_| BackendError::Auth(format!("environment variable {key_env} is not set")))?;
        Ok(Self::new(base_url, model, Some(key)))
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut messages = vec![json!({"role": "system", "content": request.system_text})];
        for m in &request.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push(json!({"role": role, "content": m.content}));
        }
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_output_tokens,
        })
    }

    fn once(&self, body: &serde_json::Value) -> Result<WireResponse, BackendError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .body_mut()
                .read_json::<WireResponse>()
                .map_err(|e| BackendError::Protocol(e.to_string())),
            401 | 403 => Err(BackendError::Auth(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => Err(BackendError::Network(format!("HTTP {status}"))),
            _ => {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                Err(BackendError::InvalidRequest(format!("HTTP {status}: {text}")))
            }
        }
    }
}

impl ChatBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = self.body(request);
        let start = Instant::now();
        let mut delay = self.backoff;
        let mut attempt = 0;
        let wire = loop {
            attempt += 1;
            match self.once(&body) {
                Ok(w) => break w,
                Err(e) if e.is_retryable() && attempt < TRANSPORT_RETRIES => {
                    tracing::warn!(error = %e, attempt, "retrying chat completion");
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                Err(e) => return Err(e),
            }
        };
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("reply has no message content".into()))?;
        let usage = match wire.usage {
            Some(u) => Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            },
            None => Usage {
                prompt_tokens: estimate_tokens(&request.full_text()),
                completion_tokens: estimate_tokens(&content),
            },
        };
        Ok(ChatResponse {
            content,
            usage,
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }
}
