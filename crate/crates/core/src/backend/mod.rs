//! Chat-completion boundary. Every agent action funnels through [`ChatBackend`].

mod remote;
mod replay;
mod retry;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{ActionKind, CharacterId, StageId, UsageRow};

pub use remote::RemoteBackend;
pub use replay::{cache_key, CacheEntry, ReplayBackend, ReplayMode, ReplayStats};
pub use retry::{corrective_message, retry_structured, Attempt, RetryError, Structured, CORRECTIVE_TEMPLATE, MAX_ATTEMPTS};
pub use scripted::{bundled_script, IndexBy, Script, ScriptRule, ScriptedBackend, BUNDLED_SCRIPTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 0.7, max_output_tokens: 512 }
    }
}

/// Identifies which action a request belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatTag {
    pub run_id: String,
    pub round: u32,
    pub stage: StageId,
    pub actor: CharacterId,
    pub action_kind: ActionKind,
    /// 1-based attempt number within a structured retry.
    #[serde(default = "one")]
    pub attempt: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub messages: Vec<ChatMessage>,
    pub params: SamplingParams,
    pub tag: ChatTag,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("request has no messages".into()));
        }
        if self.params.temperature.is_nan() || self.params.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.params.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Content of the last user message, where action prompts live.
    pub fn last_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }

    /// All text the model sees, for matching and token estimates.
    pub fn full_text(&self) -> String {
        let mut text = self.system_text.clone();
        for m in &self.messages {
            text.push('\n');
            text.push_str(&m.content);
        }
        text
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn add(&mut self, other: Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("network failure: {0}")]
    Network(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("replay cache miss for key {key}")]
    ReplayMiss { key: String },
    #[error("script error: {0}")]
    Script(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend returned an unusable reply: {0}")]
    Protocol(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Network(_))
    }
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Rough whitespace token count, used where a backend reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Where a backend comes from. Exactly one kind's fields are present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDescriptor {
    Remote {
        base_url: String,
        model: String,
        /// Environment variable holding the API key.
        #[serde(default = "default_key_env")]
        api_key_env: String,
    },
    Scripted {
        script: PathBuf,
    },
    Replay {
        cache: PathBuf,
        /// When present, misses are forwarded here and recorded.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        record_from: Option<Box<BackendDescriptor>>,
    },
}

fn default_key_env() -> String {
    "GROUPCHAT_API_KEY".to_string()
}

impl BackendDescriptor {
    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        Ok(match self {
            BackendDescriptor::Remote { base_url, model, api_key_env } => {
                Arc::new(RemoteBackend::from_env(base_url, model, api_key_env)?)
            }
            BackendDescriptor::Scripted { script } => Arc::new(ScriptedBackend::load(script)?),
            BackendDescriptor::Replay { cache, record_from } => {
                let mode = match record_from {
                    Some(inner) => ReplayMode::Record(inner.build()?),
                    None => ReplayMode::Strict,
                };
                Arc::new(ReplayBackend::open(cache, mode)?)
            }
        })
    }

    /// Wraps this descriptor so misses are recorded into `cache`.
    pub fn recording_into(self, cache: PathBuf) -> BackendDescriptor {
        match self {
            d @ BackendDescriptor::Replay { record_from: None, .. } => d,
            other => BackendDescriptor::Replay {
                cache,
                record_from: Some(Box::new(other)),
            },
        }
    }
}

/// The shorthand form, so a descriptor prints as it would be typed.
impl fmt::Display for BackendDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendDescriptor::Remote { base_url, model, api_key_env } => {
                write!(f, "remote:{base_url},{model}")?;
                if api_key_env != &default_key_env() {
                    write!(f, ",{api_key_env}")?;
                }
                Ok(())
            }
            BackendDescriptor::Scripted { script } => write!(f, "scripted:{}", script.display()),
            BackendDescriptor::Replay { cache, record_from: None } => write!(f, "replay:{}", cache.display()),
            BackendDescriptor::Replay { cache, record_from: Some(inner) } => write!(f, "record:{},{inner}", cache.display()),
        }
    }
}

impl FromStr for BackendDescriptor {
    type Err = String;

    /// Shorthands: `scripted:PATH`, `replay:DIR`, `record:DIR,INNER`,
    /// `remote:URL,MODEL[,KEY_ENV]`, or `@FILE` holding a JSON descriptor.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix('@') {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
            return serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"));
        }
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("backend `{s}` is not of the form KIND:VALUE"))?;
        match kind {
            "scripted" => Ok(BackendDescriptor::Scripted { script: rest.into() }),
            "replay" => Ok(BackendDescriptor::Replay { cache: rest.into(), record_from: None }),
            "record" => {
                let (dir, inner) = rest
                    .split_once(',')
                    .ok_or("record backend needs DIR,INNER")?;
                Ok(BackendDescriptor::Replay {
                    cache: dir.into(),
                    record_from: Some(Box::new(inner.parse()?)),
                })
            }
            "remote" => {
                let parts: Vec<&str> = rest.rsplitn(3, ',').collect();
                // URLs contain ':' but not ','
                match parts.as_slice() {
                    [model, url] => Ok(BackendDescriptor::Remote {
                        base_url: url.to_string(),
                        model: model.to_string(),
                        api_key_env: default_key_env(),
                    }),
                    [env, model, url] => Ok(BackendDescriptor::Remote {
                        base_url: url.to_string(),
                        model: model.to_string(),
                        api_key_env: env.to_string(),
                    }),
                    _ => Err("remote backend needs URL,MODEL[,KEY_ENV]".into()),
                }
            }
            other => Err(format!("unknown backend kind `{other}`")),
        }
    }
}

/// Token usage per (actor, action kind), accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UsageLedger {
    rows: BTreeMap<(CharacterId, ActionKind), (u64, Usage)>,
}

impl UsageLedger {
    pub fn add(&mut self, actor: &CharacterId, action: ActionKind, calls: u64, usage: Usage) {
        let entry = self.rows.entry((actor.clone(), action)).or_default();
        entry.0 += calls;
        entry.1.add(usage);
    }

    pub fn total(&self) -> Usage {
        let mut total = Usage::default();
        for (_, u) in self.rows.values() {
            total.add(*u);
        }
        total
    }

    pub fn calls(&self) -> u64 {
        self.rows.values().map(|(c, _)| c).sum()
    }

    pub fn rows(&self) -> Vec<UsageRow> {
        self.rows
            .iter()
            .map(|((actor, action), (calls, usage))| UsageRow {
                actor: actor.clone(),
                action_kind: *action,
                calls: *calls,
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_shorthands() {
        assert_eq!(
            "scripted:s.json".parse::<BackendDescriptor>().unwrap(),
            BackendDescriptor::Scripted { script: "s.json".into() }
        );
        let rec: BackendDescriptor = "record:cache,scripted:s.json".parse().unwrap();
        assert!(matches!(rec, BackendDescriptor::Replay { record_from: Some(_), .. }));
        let remote: BackendDescriptor = "remote:http://localhost:8080/v1,gpt-x".parse().unwrap();
        assert_eq!(
            remote,
            BackendDescriptor::Remote {
                base_url: "http://localhost:8080/v1".into(),
                model: "gpt-x".into(),
                api_key_env: "GROUPCHAT_API_KEY".into()
            }
        );
        assert!("bogus".parse::<BackendDescriptor>().is_err());
    }

    #[test]
    fn descriptor_json_has_one_kind() {
        let d = BackendDescriptor::Replay { cache: "c".into(), record_from: None };
        let json = serde_json::to_value(&d).unwrap();
        assert_eq!(json, serde_json::json!({"kind": "replay", "cache": "c"}));
    }

    #[test]
    fn usage_is_accumulated_per_actor_and_action() {
        let mut ledger = UsageLedger::default();
        let k: CharacterId = "kendall".into();
        ledger.add(&k, ActionKind::Speak, 1, Usage { prompt_tokens: 10, completion_tokens: 2 });
        ledger.add(&k, ActionKind::Speak, 2, Usage { prompt_tokens: 5, completion_tokens: 1 });
        ledger.add(&k, ActionKind::Vote, 1, Usage { prompt_tokens: 1, completion_tokens: 1 });
        let rows = ledger.rows();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].calls, 3);
        assert_eq!(rows[0].prompt_tokens, 15);
        assert_eq!(ledger.total().prompt_tokens, 16);
    }
}
