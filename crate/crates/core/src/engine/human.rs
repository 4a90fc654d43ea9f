//! Human-as-agent turns. A bound human acts only through choose, speak and
//! vote, and sees only what their character may see.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::actions::{
    parse_choose, parse_speak, parse_vote, ParseError, Roster, Speech, StructuredOutput, VoteRules,
};
use crate::model::{ActionKind, CharacterId, StageId, TranscriptLine};
use crate::persona::Belief;

/// A turn waiting on a human.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingAction {
    /// Increments per pending turn within a run.
    pub id: u64,
    pub character: CharacterId,
    pub action_kind: ActionKind,
    pub round: u32,
    pub stage: StageId,
    /// Persona card: the character's scratch text and beliefs.
    pub scratch: String,
    pub beliefs: Vec<Belief>,
    /// The character's relationship scores. Hidden unless the run turns on
    /// `human_sees_relationships`, as humans handle relationships implicitly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relationships: Option<BTreeMap<CharacterId, i32>>,
    pub transcript: Vec<TranscriptLine>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CharacterId>,
    #[serde(default)]
    pub allow_pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_rules: Option<VoteRules>,
    pub instructions: String,
    pub timeout_ms: u64,
}

/// What a human submits. Only the fields the action needs are read.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanPayload {
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub reason: Option<String>,
    #[serde(default)]
    pub pass: bool,
}

/// Blocks until the human answers, or returns `None` on timeout.
pub trait HumanGateway: Send + Sync {
    fn await_action(&self, pending: PendingAction) -> Option<StructuredOutput>;
}

/// Validates a human payload through the same parsers model replies use.
pub fn validate_human(
    pending: &PendingAction,
    payload: &HumanPayload,
    roster: &Roster,
) -> Result<StructuredOutput, ParseError> {
    let line = |key: &str, v: &Option<String>| {
        v.as_deref()
            .map(|s| format!("{key}: {}\n", s.trim()))
            .unwrap_or_default()
    };
    match pending.action_kind {
        ActionKind::Choose => {
            // a lone candidate is forced for models; humans still name it
            let raw = payload.target.as_deref().unwrap_or_default();
            if raw.trim().is_empty() {
                return Err(ParseError::Missing("TARGET"));
            }
            let text = format!("{}{}", line("TARGET", &payload.target), line("STRATEGY", &payload.strategy));
            let choice = parse_choose(&text, &pending.candidates, roster)?;
            if roster.resolve(raw).as_ref() != Some(&choice.target) {
                return Err(ParseError::NotAllowed {
                    key: "TARGET",
                    value: raw.to_string(),
                    allowed: pending.candidates.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", "),
                });
            }
            Ok(StructuredOutput::Choice(choice))
        }
        ActionKind::Speak => {
            if payload.pass && pending.allow_pass {
                return Ok(StructuredOutput::Pass);
            }
            let text = payload.text.as_deref().unwrap_or_default();
            if text.trim().is_empty() {
                return Err(ParseError::Empty("SPEECH"));
            }
            // verbatim: the human's text is not reinterpreted as keys
            match parse_speak(&format!("SPEECH: {text}"), false)? {
                Speech::Say(_) => Ok(StructuredOutput::Utterance { text: text.to_string() }),
                Speech::Pass => Ok(StructuredOutput::Pass),
            }
        }
        ActionKind::Vote => {
            let rules = pending.vote_rules.unwrap_or(VoteRules { self_forbidden: true, allow_none: false });
            let raw = payload.target.as_deref().unwrap_or_default();
            if raw.trim().is_empty() {
                return Err(ParseError::Missing("VOTE"));
            }
            let text = format!("{}{}", line("VOTE", &payload.target), line("REASON", &payload.reason));
            let vote = parse_vote(&text, &pending.candidates, &pending.character, rules, roster)?;
            if vote.target.is_some() && roster.resolve(raw) != vote.target {
                return Err(ParseError::NotAllowed {
                    key: "VOTE",
                    value: raw.to_string(),
                    allowed: pending.candidates.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", "),
                });
            }
            Ok(StructuredOutput::Vote(vote))
        }
        _ => Err(ParseError::Missing("ACTION")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pending(kind: ActionKind, candidates: &[&str]) -> PendingAction {
        PendingAction {
            id: 1,
            character: "shiv".into(),
            action_kind: kind,
            round: 1,
            stage: StageId::PrivateChat,
            scratch: String::new(),
            beliefs: vec![],
            relationships: None,
            transcript: vec![],
            candidates: candidates.iter().map(|c| CharacterId::from(*c)).collect(),
            allow_pass: false,
            vote_rules: Some(VoteRules { self_forbidden: true, allow_none: false }),
            instructions: String::new(),
            timeout_ms: 1000,
        }
    }

    fn roster() -> Roster {
        Roster::new([
            ("shiv".into(), "Shiv Roy".into()),
            ("logan".into(), "Logan Roy".into()),
            ("gerri".into(), "Gerri Kellman".into()),
        ])
    }

    #[test]
    fn choose_must_name_a_candidate() {
        let p = pending(ActionKind::Choose, &["logan", "gerri"]);
        let ok = HumanPayload { target: Some("Gerri".into()), ..Default::default() };
        assert!(matches!(validate_human(&p, &ok, &roster()), Ok(StructuredOutput::Choice(c)) if c.target.as_str() == "gerri"));
        let bad = HumanPayload { target: Some("shiv".into()), ..Default::default() };
        assert!(validate_human(&p, &bad, &roster()).is_err());
        let single = pending(ActionKind::Choose, &["logan"]);
        assert!(validate_human(&single, &bad, &roster()).is_err());
    }

    #[test]
    fn speech_is_verbatim_and_non_empty() {
        let p = pending(ActionKind::Speak, &[]);
        let said = HumanPayload { text: Some("VOTE: me\nPASS".into()), ..Default::default() };
        assert_eq!(
            validate_human(&p, &said, &roster()).unwrap(),
            StructuredOutput::Utterance { text: "VOTE: me\nPASS".into() }
        );
        let empty = HumanPayload { text: Some("  ".into()), ..Default::default() };
        assert_eq!(validate_human(&p, &empty, &roster()), Err(ParseError::Empty("SPEECH")));
    }

    #[test]
    fn self_vote_rejected() {
        let p = pending(ActionKind::Vote, &["logan", "gerri", "shiv"]);
        let me = HumanPayload { target: Some("shiv".into()), ..Default::default() };
        assert_eq!(validate_human(&p, &me, &roster()), Err(ParseError::SelfVote));
    }
}
