//! The seven agent actions: request assembly, the backend call with
//! structured retry, and parsing. Persona and log writes happen in the engine.

pub mod parse;
pub mod prompt;

use serde::{Deserialize, Serialize};

use crate::backend::{
    retry_structured, ChatBackend, ChatMessage, ChatRequest, ChatTag, RetryError, SamplingParams, Structured,
};
use crate::model::CharacterId;

pub use parse::{
    first_integer, parse_choose, parse_free, parse_reflect, parse_speak, parse_vote, ChoiceOutput, ParseError,
    ReflectRules, ReflectionOutput, RelationshipUpdate, Roster, Speech, VoteOutput, VoteRules,
};
pub use prompt::{PromptVars, TemplateError, TemplateSet};

/// Sent after an inserted private thought, before the action reply.
pub const THOUGHT_FOLLOW_UP: &str = "Keeping that thought to yourself, now answer the request above in the required format.";

/// Builds a request. A private thought, when present, is replayed as the
/// agent's own earlier turn followed by a short follow-up.
pub fn build_request(
    system_text: String,
    user_text: String,
    thought: Option<&str>,
    params: SamplingParams,
    tag: ChatTag,
) -> ChatRequest {
    let mut messages = vec![ChatMessage::user(user_text)];
    if let Some(t) = thought {
        messages.push(ChatMessage::assistant(format!("THOUGHT: {t}")));
        messages.push(ChatMessage::user(THOUGHT_FOLLOW_UP));
    }
    ChatRequest {
        system_text,
        messages,
        params,
        tag,
    }
}

/// A parsed action output of any kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructuredOutput {
    Thought { text: String },
    Plan { text: String },
    Choice(ChoiceOutput),
    Utterance { text: String },
    Pass,
    Summary { text: String },
    Reflection(ReflectionOutput),
    Vote(VoteOutput),
}

pub type ActionResult<T> = Result<Structured<T>, RetryError>;

fn err(e: ParseError) -> String {
    e.to_string()
}

pub fn act_think(backend: &dyn ChatBackend, request: ChatRequest, max_attempts: u32) -> ActionResult<String> {
    retry_structured(backend, request, max_attempts, |t| parse_free(t, "THOUGHT").map_err(err))
}

pub fn act_perceive(backend: &dyn ChatBackend, request: ChatRequest, max_attempts: u32) -> ActionResult<String> {
    retry_structured(backend, request, max_attempts, |t| parse_free(t, "PLAN").map_err(err))
}

pub fn act_choose(
    backend: &dyn ChatBackend,
    request: ChatRequest,
    max_attempts: u32,
    candidates: &[CharacterId],
    roster: &Roster,
) -> ActionResult<ChoiceOutput> {
    retry_structured(backend, request, max_attempts, |t| {
        parse_choose(t, candidates, roster).map_err(err)
    })
}

pub fn act_speak(
    backend: &dyn ChatBackend,
    request: ChatRequest,
    max_attempts: u32,
    allow_pass: bool,
) -> ActionResult<Speech> {
    retry_structured(backend, request, max_attempts, |t| parse_speak(t, allow_pass).map_err(err))
}

pub fn act_summarize(backend: &dyn ChatBackend, request: ChatRequest, max_attempts: u32) -> ActionResult<String> {
    retry_structured(backend, request, max_attempts, |t| parse_free(t, "SUMMARY").map_err(err))
}

pub fn act_reflect(
    backend: &dyn ChatBackend,
    request: ChatRequest,
    max_attempts: u32,
    rules: ReflectRules<'_>,
    roster: &Roster,
) -> ActionResult<ReflectionOutput> {
    retry_structured(backend, request, max_attempts, |t| parse_reflect(t, rules, roster).map_err(err))
}

pub fn act_vote(
    backend: &dyn ChatBackend,
    request: ChatRequest,
    max_attempts: u32,
    eligible: &[CharacterId],
    voter: &CharacterId,
    rules: VoteRules,
    roster: &Roster,
) -> ActionResult<VoteOutput> {
    retry_structured(backend, request, max_attempts, |t| {
        parse_vote(t, eligible, voter, rules, roster).map_err(err)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{IndexBy, Script, ScriptRule, ScriptedBackend};
    use crate::model::{ActionKind, StageId};

    fn tag(kind: ActionKind) -> ChatTag {
        ChatTag {
            run_id: "r".into(),
            round: 1,
            stage: StageId::PrivateChat,
            actor: "kendall".into(),
            action_kind: kind,
            attempt: 1,
        }
    }

    #[test]
    fn thought_is_inserted_verbatim() {
        let r = build_request("s".into(), "speak".into(), Some("I should flatter Lawrence"), SamplingParams::default(), tag(ActionKind::Speak));
        assert_eq!(r.messages.len(), 3);
        assert!(r.messages[1].content.contains("I should flatter Lawrence"));
        assert_eq!(r.last_user_text(), THOUGHT_FOLLOW_UP);
    }

    #[test]
    fn choose_outside_candidates_exhausts() {
        let backend = ScriptedBackend::new(
            Script::default().rule(ScriptRule::new().replies(["TARGET: logan"], IndexBy::Fixed)),
        )
        .unwrap();
        let roster = Roster::new([("logan".into(), "Logan".into()), ("shiv".into(), "Shiv".into()), ("lawrence".into(), "Lawrence".into())]);
        let req = build_request("s".into(), "choose".into(), None, SamplingParams::default(), tag(ActionKind::Choose));
        let out = act_choose(&backend, req, 5, &["lawrence".into(), "shiv".into()], &roster);
        assert!(matches!(out, Err(RetryError::FormatExhausted { ref attempts, .. }) if attempts.len() == 5));
        assert_eq!(backend.calls(), 5);
    }
}
