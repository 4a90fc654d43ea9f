use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{estimate_tokens, BackendError, ChatBackend, ChatRequest, ChatResponse, Usage};
use crate::model::{ActionKind, CharacterId, StageId};

/// How a rule with several responses picks one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexBy {
    /// Always the first response.
    #[default]
    Fixed,
    /// The retry attempt number (1-based), so retries can be scripted.
    Attempt,
    /// The round number (1-based).
    Round,
    /// A per-rule call counter. Not pure: depends on call order.
    Call,
    /// A hash of the whole request, so replies vary with the conversation
    /// while staying a pure function of the prompt.
    Content,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_kind: Option<ActionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<CharacterId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    /// Matched against the system text and every message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
    #[serde(default)]
    pub index_by: IndexBy,
}

/// A rule list; the first matching rule answers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl Script {
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        serde_json::from_str(text).map_err(|e| BackendError::Script(e.to_string()))
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }
}

impl ScriptRule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn action(mut self, kind: ActionKind) -> Self {
        self.action_kind = Some(kind);
        self
    }

    pub fn by(mut self, actor: impl Into<CharacterId>) -> Self {
        self.actor = Some(actor.into());
        self
    }

    pub fn in_stage(mut self, stage: StageId) -> Self {
        self.stage = Some(stage);
        self
    }

    pub fn in_round(mut self, round: u32) -> Self {
        self.round = Some(round);
        self
    }

    pub fn matching(mut self, regex: &str) -> Self {
        self.content_regex = Some(regex.to_string());
        self
    }

    pub fn reply(mut self, text: impl Into<String>) -> Self {
        self.responses = vec![text.into()];
        self
    }

    pub fn replies<I, S>(mut self, texts: I, index_by: IndexBy) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.responses = texts.into_iter().map(Into::into).collect();
        self.index_by = index_by;
        self
    }
}

struct CompiledRule {
    rule: ScriptRule,
    regex: Option<Regex>,
    responses: Vec<String>,
}

pub const BUNDLED_SCRIPTS: [&str; 3] = ["demo", "hostile", "stubborn"];

pub fn bundled_script(name: &str) -> Option<&'static str> {
    match name {
        "demo" => Some(include_str!("../../scripts/demo.json")),
        "hostile" => Some(include_str!("../../scripts/hostile.json")),
        "stubborn" => Some(include_str!("../../scripts/stubborn.json")),
        _ => None,
    }
}

/// Deterministic responder driven by a [`Script`].
///
/// Response text is a template: `{actor}`, `{round}`, `{stage}`, `{attempt}`
/// and `{candidate}` are substituted. `{candidate}` is one entry of the
/// prompt's `CANDIDATES:` line, picked by a hash of the tag. A line holding
/// `{each}` is repeated once per candidate.
pub struct ScriptedBackend {
    id: String,
    rules: Vec<CompiledRule>,
    fallback: Option<String>,
    counters: Mutex<HashMap<usize, u64>>,
    calls: AtomicU64,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("id", &self.id)
            .field("rules", &self.rules.len())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Result<Self, BackendError> {
        Self::with_id("scripted", script)
    }

    pub fn with_id(id: impl Into<String>, script: Script) -> Result<Self, BackendError> {
        let mut rules = Vec::with_capacity(script.rules.len());
        for (i, rule) in script.rules.into_iter().enumerate() {
            let regex = match &rule.content_regex {
                Some(src) => Some(
                    Regex::new(src).map_err(|e| BackendError::Script(format!("rule {i}: {e}")))?,
                ),
                None => None,
            };
            let mut responses = rule.responses.clone();
            if let Some(single) = &rule.response {
                responses.insert(0, single.clone());
            }
            if responses.is_empty() {
                return Err(BackendError::Script(format!("rule {i} has no response")));
            }
            rules.push(CompiledRule { rule, regex, responses });
        }
        Ok(Self {
            id: id.into(),
            rules,
            fallback: script.fallback,
            counters: Mutex::new(HashMap::new()),
            calls: AtomicU64::new(0),
        })
    }

    /// Loads a script file. A path that does not exist but names a bundled
    /// script (`demo`, `hostile`, `stubborn`) loads that script instead.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let bundled = (!path.exists())
            .then(|| path.to_str().and_then(bundled_script))
            .flatten();
        let text = match bundled {
            Some(text) => text.to_string(),
            None => std::fs::read_to_string(path)
                .map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?,
        };
        let script = Script::from_json(&text)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        let id = path
            .file_stem()
            .map(|s| format!("scripted:{}", s.to_string_lossy()))
            .unwrap_or_else(|| "scripted".into());
        Self::with_id(id, script)
    }

    /// Total completions served.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn pick(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let tag = &request.tag;
        let mut text: Option<String> = None;
        for (i, c) in self.rules.iter().enumerate() {
            let r = &c.rule;
            if r.action_kind.is_some_and(|k| k != tag.action_kind)
                || r.actor.as_ref().is_some_and(|a| a != &tag.actor)
                || r.stage.is_some_and(|s| s != tag.stage)
                || r.round.is_some_and(|n| n != tag.round)
            {
                continue;
            }
            if let Some(re) = &c.regex {
                if !re.is_match(&request.full_text()) {
                    continue;
                }
            }
            let idx = match r.index_by {
                IndexBy::Fixed => 0,
                IndexBy::Attempt => tag.attempt.saturating_sub(1) as u64,
                IndexBy::Round => tag.round.saturating_sub(1) as u64,
                IndexBy::Call => {
                    let mut counters = self.counters.lock().expect("counter lock");
                    let n = counters.entry(i).or_insert(0);
                    let current = *n;
                    *n += 1;
                    current
                }
                IndexBy::Content => stable_hash(&request.full_text()) % c.responses.len() as u64,
            };
            let idx = (idx as usize).min(c.responses.len() - 1);
            text = Some(c.responses[idx].clone());
            break;
        }
        let template = text.or_else(|| self.fallback.clone()).ok_or_else(|| {
            BackendError::Script(format!(
                "no rule matches {} by {} in round {} ({})",
                tag.action_kind, tag.actor, tag.round, tag.stage
            ))
        })?;
        Ok(render(&template, request))
    }
}

fn candidates(request: &ChatRequest) -> Vec<String> {
    // the prompt may be followed by a replayed thought and a follow-up
    request
        .messages
        .iter()
        .rev()
        .filter(|m| m.role == super::Role::User)
        .find_map(|m| m.content.lines().rev().find_map(|l| l.trim().strip_prefix("CANDIDATES:")))
        .map(|rest| {
            rest.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty() && s != "none")
                .collect()
        })
        .unwrap_or_default()
}

// sha256 rather than the std hasher, whose output may change between releases
fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn render(template: &str, request: &ChatRequest) -> String {
    let tag = &request.tag;
    let cands = candidates(request);
    let candidate = if cands.is_empty() {
        String::new()
    } else {
        let key = format!("{}|{}|{}|{}", tag.actor, tag.round, tag.stage.as_str(), tag.action_kind.as_str());
        cands[(stable_hash(&key) % cands.len() as u64) as usize].clone()
    };
    let fill = |line: &str| {
        line.replace("{actor}", tag.actor.as_str())
            .replace("{round}", &tag.round.to_string())
            .replace("{stage}", tag.stage.as_str())
            .replace("{attempt}", &tag.attempt.to_string())
            .replace("{candidate}", &candidate)
    };
    let mut out = Vec::new();
    for line in template.split('\n') {
        if line.contains("{each}") {
            for c in &cands {
                out.push(fill(&line.replace("{each}", c)));
            }
        } else {
            out.push(fill(line));
        }
    }
    out.join("\n")
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let content = self.pick(request)?;
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: estimate_tokens(&request.full_text()),
                completion_tokens: estimate_tokens(&content),
            },
            content,
            latency_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatMessage, ChatTag, SamplingParams};

    fn request(kind: ActionKind, prompt: &str, attempt: u32) -> ChatRequest {
        ChatRequest {
            system_text: "sys".into(),
            messages: vec![ChatMessage::user(prompt)],
            params: SamplingParams::default(),
            tag: ChatTag {
                run_id: "t-1".into(),
                round: 2,
                stage: StageId::Settlement,
                actor: "shiv".into(),
                action_kind: kind,
                attempt,
            },
        }
    }

    #[test]
    fn vote_rule_returns_exact_text() {
        let backend = ScriptedBackend::new(
            Script::default().rule(ScriptRule::new().action(ActionKind::Vote).reply("VOTE: kendall")),
        )
        .unwrap();
        let resp = backend.complete(&request(ActionKind::Vote, "vote now", 1)).unwrap();
        assert_eq!(resp.content, "VOTE: kendall");
        assert_eq!(resp.latency_ms, 0);
    }

    #[test]
    fn attempt_indexing_and_templates() {
        let backend = ScriptedBackend::new(Script::default().rule(
            ScriptRule::new().replies(["junk", "VOTE: {candidate} by {actor} r{round}"], IndexBy::Attempt),
        ))
        .unwrap();
        let prompt = "pick\nCANDIDATES: roman";
        assert_eq!(backend.complete(&request(ActionKind::Vote, prompt, 1)).unwrap().content, "junk");
        assert_eq!(
            backend.complete(&request(ActionKind::Vote, prompt, 4)).unwrap().content,
            "VOTE: roman by shiv r2"
        );
    }

    #[test]
    fn each_expands_per_candidate() {
        let backend = ScriptedBackend::new(
            Script::default().rule(ScriptRule::new().reply("INSIGHT: x\nREL: {each} | -10 | no")),
        )
        .unwrap();
        let out = backend
            .complete(&request(ActionKind::Reflect, "CANDIDATES: a, b", 1))
            .unwrap()
            .content;
        assert_eq!(out, "INSIGHT: x\nREL: a | -10 | no\nREL: b | -10 | no");
    }

    #[test]
    fn no_match_without_fallback_is_an_error() {
        let backend = ScriptedBackend::new(
            Script::default().rule(ScriptRule::new().action(ActionKind::Speak).reply("hi")),
        )
        .unwrap();
        assert!(matches!(
            backend.complete(&request(ActionKind::Vote, "x", 1)),
            Err(BackendError::Script(_))
        ));
    }

    #[test]
    fn content_regex_filters() {
        let backend = ScriptedBackend::new(
            Script::default()
                .rule(ScriptRule::new().matching("loyalty").reply("A"))
                .with_fallback("B"),
        )
        .unwrap();
        assert_eq!(backend.complete(&request(ActionKind::Speak, "probe loyalty", 1)).unwrap().content, "A");
        assert_eq!(backend.complete(&request(ActionKind::Speak, "other", 1)).unwrap().content, "B");
    }

    #[test]
    fn bundled_scripts_load_by_name() {
        for name in BUNDLED_SCRIPTS {
            let b = ScriptedBackend::load(Path::new(name)).unwrap();
            assert_eq!(b.id(), format!("scripted:{name}"));
        }
        assert!(ScriptedBackend::load(Path::new("no-such-script")).is_err());
    }
}
