//! The `KEY: value` reply grammar.
//!
//! A reply is scanned line by line. A line whose first word is a known
//! uppercase key followed by `:` opens a field; following lines that do not
//! open another field continue it. Text before the first key, code fences and
//! markdown emphasis around the key are ignored. Repeatable keys (`REL`,
//! `BELIEF`) keep every occurrence; for the others the first wins.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{CampId, CharacterId, StoryConfig};

pub const KEYS: [&str; 14] = [
    "THOUGHT", "PLAN", "TARGET", "STRATEGY", "SPEECH", "PASS", "SUMMARY", "INSIGHT", "REL",
    "BELIEF", "CAMP", "VOTE", "REASON", "ANSWER",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("missing {0}")]
    Missing(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{key} score `{value}` is not an integer")]
    BadScore { key: &'static str, value: String },
    #[error("{key} line `{line}` must have the form {form}")]
    BadLine { key: &'static str, line: String, form: &'static str },
    #[error("{key} `{value}` is not one of: {allowed}")]
    NotAllowed { key: &'static str, value: String, allowed: String },
    #[error("VOTE may not name yourself")]
    SelfVote,
}

/// One `KEY: value` field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub key: &'static str,
    pub value: String,
}

fn key_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*>#]+\s+)?[*_]*([A-Z][A-Z_]*)[*_]*\s*:[*_]*\s?(.*)$").expect("key regex")
    })
}

/// Splits a reply into fields.
pub fn fields(text: &str) -> Vec<Field> {
    let mut out: Vec<Field> = Vec::new();
    let mut open = false;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            continue;
        }
        let known = key_line().captures(line).and_then(|c| {
            let k = c.get(1)?.as_str();
            KEYS.iter().find(|known| **known == k).map(|k| (*k, c[2].to_string()))
        });
        match known {
            Some((key, value)) => {
                out.push(Field { key, value: value.trim_end().to_string() });
                open = true;
            }
            None if line.trim() == "PASS" => {
                out.push(Field { key: "PASS", value: String::new() });
                open = false;
            }
            None if open => {
                let last = out.last_mut().expect("open field");
                if last.key == "REL" || last.key == "BELIEF" || last.key == "CAMP" || last.key == "VOTE"
                    || last.key == "TARGET"
                {
                    open = false;
                    continue;
                }
                last.value.push('\n');
                last.value.push_str(line.trim_end());
            }
            None => {}
        }
    }
    for f in &mut out {
        f.value = f.value.trim().to_string();
    }
    out
}

fn first<'a>(fields: &'a [Field], key: &str) -> Option<&'a str> {
    fields.iter().find(|f| f.key == key).map(|f| f.value.as_str())
}

fn all<'a>(fields: &'a [Field], key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
    fields.iter().filter(move |f| f.key == key).map(|f| f.value.as_str())
}

/// Accepts `2`, `+2`, `-3`, with optional surrounding whitespace.
pub fn parse_score(key: &'static str, raw: &str) -> Result<i32, ParseError> {
    let t = raw.trim();
    let valid = !t.is_empty()
        && t.strip_prefix(['+', '-']).unwrap_or(t).chars().all(|c| c.is_ascii_digit())
        && t.len() > usize::from(t.starts_with(['+', '-']));
    if !valid {
        return Err(ParseError::BadScore { key, value: t.to_string() });
    }
    t.parse::<i32>()
        .map_err(|_| ParseError::BadScore { key, value: t.to_string() })
}

/// Resolves free-text mentions to character ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Roster {
    entries: Vec<(CharacterId, String)>,
}

impl Roster {
    pub fn new<I: IntoIterator<Item = (CharacterId, String)>>(entries: I) -> Self {
        Self { entries: entries.into_iter().collect() }
    }

    pub fn from_story(story: &StoryConfig) -> Self {
        Self::new(story.characters.iter().map(|c| (c.id.clone(), c.name.clone())))
    }

    /// Case-insensitive match on id, full name, or a name word unique in the roster.
    pub fn resolve(&self, mention: &str) -> Option<CharacterId> {
        let m = normalize(mention);
        if m.is_empty() {
            return None;
        }
        if let Some((id, _)) = self
            .entries
            .iter()
            .find(|(id, name)| id.as_str().to_lowercase() == m || name.to_lowercase() == m)
        {
            return Some(id.clone());
        }
        let hits: Vec<&CharacterId> = self
            .entries
            .iter()
            .filter(|(_, name)| name.to_lowercase().split_whitespace().any(|w| w == m))
            .map(|(id, _)| id)
            .collect();
        match hits.as_slice() {
            [only] => Some((*only).clone()),
            _ => None,
        }
    }
}

fn normalize(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| matches!(c, '*' | '"' | '\'' | '`' | '_' | '[' | ']' | '(' | ')'))
        .trim_end_matches(['.', ',', '!', ';', ':', '?'])
        .trim()
        .to_lowercase()
}

fn listing(ids: &[CharacterId]) -> String {
    ids.iter().map(CharacterId::as_str).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOutput {
    pub target: CharacterId,
    pub strategy: String,
}

/// `TARGET: id` plus optional `STRATEGY:`. A single candidate is forced.
pub fn parse_choose(text: &str, candidates: &[CharacterId], roster: &Roster) -> Result<ChoiceOutput, ParseError> {
    let f = fields(text);
    let strategy = first(&f, "STRATEGY").unwrap_or_default().to_string();
    if let [only] = candidates {
        let strategy = if strategy.is_empty() { text.trim().to_string() } else { strategy };
        return Ok(ChoiceOutput { target: only.clone(), strategy });
    }
    let raw = first(&f, "TARGET").ok_or(ParseError::Missing("TARGET"))?;
    let target = roster
        .resolve(raw)
        .filter(|id| candidates.contains(id))
        .ok_or_else(|| ParseError::NotAllowed {
            key: "TARGET",
            value: raw.to_string(),
            allowed: listing(candidates),
        })?;
    Ok(ChoiceOutput { target, strategy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRules {
    pub self_forbidden: bool,
    pub allow_none: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutput {
    /// `None` only when the rules allow declining.
    pub target: Option<CharacterId>,
    pub reason: String,
}

/// `VOTE: id` plus optional `REASON:`. With a single eligible target and no
/// option to decline, the vote is forced.
pub fn parse_vote(
    text: &str,
    eligible: &[CharacterId],
    voter: &CharacterId,
    rules: VoteRules,
    roster: &Roster,
) -> Result<VoteOutput, ParseError> {
    let f = fields(text);
    let reason = first(&f, "REASON").unwrap_or_default().to_string();
    let allowed: Vec<CharacterId> = eligible
        .iter()
        .filter(|id| !(rules.self_forbidden && *id == voter))
        .cloned()
        .collect();
    if let ([only], false) = (allowed.as_slice(), rules.allow_none) {
        return Ok(VoteOutput { target: Some(only.clone()), reason });
    }
    let raw = first(&f, "VOTE").ok_or(ParseError::Missing("VOTE"))?;
    if rules.allow_none && normalize(raw) == "none" {
        return Ok(VoteOutput { target: None, reason });
    }
    let resolved = roster.resolve(raw);
    if rules.self_forbidden && resolved.as_ref() == Some(voter) {
        return Err(ParseError::SelfVote);
    }
    let target = resolved
        .filter(|id| allowed.contains(id))
        .ok_or_else(|| {
            let mut list = listing(&allowed);
            if rules.allow_none {
                list.push_str(", none");
            }
            ParseError::NotAllowed { key: "VOTE", value: raw.to_string(), allowed: list }
        })?;
    Ok(VoteOutput { target: Some(target), reason })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationshipUpdate {
    pub object: CharacterId,
    pub score: i32,
    pub judgement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampProposal {
    pub camp: CampId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionOutput {
    pub insights: String,
    pub relationships: Vec<RelationshipUpdate>,
    /// (0-based belief index, proposed score).
    pub beliefs: Vec<(usize, i32)>,
    pub camp: Option<CampProposal>,
    /// Lines ignored because they named no usable character or belief.
    pub dropped: Vec<String>,
}

/// Context for validating a reflection.
#[derive(Debug, Clone, Copy)]
pub struct ReflectRules<'a> {
    pub actor: &'a CharacterId,
    pub others: &'a BTreeSet<CharacterId>,
    pub belief_count: usize,
    pub camps: &'a BTreeSet<CampId>,
}

/// `INSIGHT:`, any number of `REL: id | score | judgement` and
/// `BELIEF: n | score` lines (n is 1-based), and optionally `CAMP: camp | reason`.
/// Non-integer scores fail the whole reply; unknown ids are dropped.
pub fn parse_reflect(text: &str, rules: ReflectRules<'_>, roster: &Roster) -> Result<ReflectionOutput, ParseError> {
    let f = fields(text);
    let mut out = ReflectionOutput {
        insights: first(&f, "INSIGHT").unwrap_or_default().to_string(),
        ..Default::default()
    };
    let mut seen = BTreeSet::new();
    for line in all(&f, "REL") {
        let parts: Vec<&str> = line.splitn(3, '|').map(str::trim).collect();
        let [who, score, rest @ ..] = parts.as_slice() else {
            return Err(ParseError::BadLine { key: "REL", line: line.into(), form: "REL: id | score | judgement" });
        };
        let score = parse_score("REL", score)?;
        match roster.resolve(who).filter(|id| rules.others.contains(id) && id != rules.actor) {
            Some(object) if seen.insert(object.clone()) => out.relationships.push(RelationshipUpdate {
                object,
                score,
                judgement: rest.first().copied().unwrap_or_default().to_string(),
            }),
            _ => out.dropped.push(format!("REL: {line}")),
        }
    }
    let mut seen_beliefs = BTreeSet::new();
    for line in all(&f, "BELIEF") {
        let parts: Vec<&str> = line.splitn(3, '|').map(str::trim).collect();
        let [idx, score, ..] = parts.as_slice() else {
            return Err(ParseError::BadLine { key: "BELIEF", line: line.into(), form: "BELIEF: n | score" });
        };
        let score = parse_score("BELIEF", score)?;
        match idx.trim_start_matches('#').parse::<usize>() {
            Ok(n) if n >= 1 && n <= rules.belief_count && seen_beliefs.insert(n) => out.beliefs.push((n - 1, score)),
            _ => out.dropped.push(format!("BELIEF: {line}")),
        }
    }
    if let Some(line) = first(&f, "CAMP") {
        let (camp, reason) = line.split_once('|').unwrap_or((line, ""));
        let camp = normalize(camp);
        if !camp.is_empty() && camp != "none" && camp != "stay" {
            match rules.camps.iter().find(|c| c.as_str().to_lowercase() == camp) {
                Some(c) => out.camp = Some(CampProposal { camp: c.clone(), reason: reason.trim().to_string() }),
                None => out.dropped.push(format!("CAMP: {line}")),
            }
        }
    }
    if out.insights.is_empty() && out.relationships.is_empty() && out.beliefs.is_empty() {
        return Err(ParseError::Missing("INSIGHT"));
    }
    Ok(out)
}

/// Reads a single free-text field. Without the key the whole reply is taken.
pub fn parse_free(text: &str, key: &'static str) -> Result<String, ParseError> {
    let f = fields(text);
    let value = match first(&f, key) {
        Some(v) => v.to_string(),
        None if f.is_empty() => strip_fences(text),
        None => return Err(ParseError::Missing(key)),
    };
    if value.trim().is_empty() {
        return Err(ParseError::Empty(key));
    }
    Ok(value)
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum Speech {
    Say(String),
    Pass,
}

/// `SPEECH: text`, or `PASS` when passing is allowed.
pub fn parse_speak(text: &str, allow_pass: bool) -> Result<Speech, ParseError> {
    let f = fields(text);
    let said = first(&f, "SPEECH");
    let pass = match said {
        Some(s) => s.trim() == "PASS",
        None => f.iter().any(|x| x.key == "PASS"),
    };
    if allow_pass && pass {
        return Ok(Speech::Pass);
    }
    parse_free(text, "SPEECH").map(Speech::Say)
}

/// First integer in the text, for count-echo probes.
pub fn first_integer(text: &str) -> Option<i64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"-?\d+").expect("int regex"));
    re.find(text).and_then(|m| m.as_str().parse().ok())
}
