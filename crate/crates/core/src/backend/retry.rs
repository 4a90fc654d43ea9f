use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatMessage, ChatRequest, Usage};

pub const MAX_ATTEMPTS: u32 = 5;

/// Corrective message sent after a reply fails to parse. `{reason}` is the
/// parser's error.
pub const CORRECTIVE_TEMPLATE: &str =
    "Your previous reply failed validation: {reason}. Reply again following the required format exactly.";

pub fn corrective_message(reason: &str) -> String {
    CORRECTIVE_TEMPLATE.replace("{reason}", reason)
}

/// A reply that failed to parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub raw: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct Structured<T> {
    pub value: T,
    pub raw: String,
    /// Backend calls made, including the successful one.
    pub calls: u32,
    pub failed: Vec<Attempt>,
    pub usage: Usage,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum RetryError {
    #[error("no valid reply after {} attempts", attempts.len())]
    FormatExhausted { attempts: Vec<Attempt>, usage: Usage },
    #[error("backend failed on attempt {calls}: {error}")]
    Backend {
        error: BackendError,
        calls: u32,
        failed: Vec<Attempt>,
        usage: Usage,
    },
}

impl RetryError {
    pub fn calls(&self) -> u32 {
        match self {
            RetryError::FormatExhausted { attempts, .. } => attempts.len() as u32,
            RetryError::Backend { calls, .. } => *calls,
        }
    }

    pub fn usage(&self) -> Usage {
        match self {
            RetryError::FormatExhausted { usage, .. } | RetryError::Backend { usage, .. } => *usage,
        }
    }
}

/// Calls the backend until `parse` accepts a reply, at most `max_attempts`
/// times (never more than [`MAX_ATTEMPTS`]). Each failure appends the raw
/// reply and a corrective user message, and bumps the tag's attempt number.
pub fn retry_structured<T, F>(
    backend: &dyn ChatBackend,
    mut request: ChatRequest,
    max_attempts: u32,
    mut parse: F,
) -> Result<Structured<T>, RetryError>
where
    F: FnMut(&str) -> Result<T, String>,
{
    let limit = max_attempts.clamp(1, MAX_ATTEMPTS);
    let mut failed = Vec::new();
    let mut usage = Usage::default();
    for attempt in 1..=limit {
        request.tag.attempt = attempt;
        let response = match backend.complete(&request) {
            Ok(r) => r,
            Err(error) => {
                return Err(RetryError::Backend {
                    error,
                    calls: attempt,
                    failed,
                    usage,
                })
            }
        };
        usage.add(response.usage);
        match parse(&response.content) {
            Ok(value) => {
                return Ok(Structured {
                    value,
                    raw: response.content,
                    calls: attempt,
                    failed,
                    usage,
                })
            }
            Err(reason) => {
                request.messages.push(ChatMessage::assistant(response.content.clone()));
                request.messages.push(ChatMessage::user(corrective_message(&reason)));
                failed.push(Attempt {
                    raw: response.content,
                    error: reason,
                });
            }
        }
    }
    Err(RetryError::FormatExhausted { attempts: failed, usage })
}
