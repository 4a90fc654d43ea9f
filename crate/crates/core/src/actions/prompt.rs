//! Prompt templates and the renderers that fill their placeholders.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::model::{ActionKind, CharacterId, StoryConfig, TranscriptLine, WorldState};
use crate::persona::{Belief, MemoryItem, RelationshipEntry, Scratch};

pub const PLACEHOLDERS: [&str; 9] = [
    "progress_description",
    "object_descriptions",
    "scratch",
    "beliefs",
    "relationships",
    "upstream_memory",
    "transcript",
    "candidates",
    "stage_rules",
];

const SYSTEM_REQUIRED: [&str; 3] = ["progress_description", "object_descriptions", "scratch"];

/// Placeholders an action's prompt assembly fills; its template must use all of them.
pub fn required_placeholders(kind: ActionKind) -> &'static [&'static str] {
    match kind {
        ActionKind::Think => &["beliefs", "transcript", "stage_rules"],
        ActionKind::Perceive => &["beliefs", "relationships", "upstream_memory", "stage_rules"],
        ActionKind::Choose => &["relationships", "upstream_memory", "candidates", "stage_rules"],
        ActionKind::Speak => &["relationships", "upstream_memory", "transcript", "stage_rules"],
        ActionKind::Summarize => &["upstream_memory", "transcript"],
        ActionKind::Reflect => &["beliefs", "relationships", "upstream_memory", "candidates", "stage_rules"],
        ActionKind::Vote => &["relationships", "upstream_memory", "transcript", "candidates", "stage_rules"],
        ActionKind::CampChange | ActionKind::ResourceTransfer => &[],
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{template}` lacks placeholder {{{placeholder}}}")]
    MissingPlaceholder { template: String, placeholder: &'static str },
    #[error("template `{template}` uses unknown placeholder {{{placeholder}}}")]
    UnknownPlaceholder { template: String, placeholder: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Values for every placeholder. Unused ones are simply not referenced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptVars {
    pub progress_description: String,
    pub object_descriptions: String,
    pub scratch: String,
    pub beliefs: String,
    pub relationships: String,
    pub upstream_memory: String,
    pub transcript: String,
    pub candidates: String,
    pub stage_rules: String,
}

impl PromptVars {
    fn get(&self, name: &str) -> Option<&str> {
        Some(match name {
            "progress_description" => &self.progress_description,
            "object_descriptions" => &self.object_descriptions,
            "scratch" => &self.scratch,
            "beliefs" => &self.beliefs,
            "relationships" => &self.relationships,
            "upstream_memory" => &self.upstream_memory,
            "transcript" => &self.transcript,
            "candidates" => &self.candidates,
            "stage_rules" => &self.stage_rules,
            _ => return None,
        })
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("placeholder regex"))
}

/// One template per agent action plus the shared system template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    system: String,
    actions: BTreeMap<ActionKind, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

fn file_name(kind: ActionKind) -> String {
    format!("{}.txt", kind.as_str())
}

impl TemplateSet {
    pub fn builtin() -> Self {
        use ActionKind::*;
        let actions = BTreeMap::from([
            (Think, include_str!("../../templates/think.txt").to_string()),
            (Perceive, include_str!("../../templates/perceive.txt").to_string()),
            (Choose, include_str!("../../templates/choose.txt").to_string()),
            (Speak, include_str!("../../templates/speak.txt").to_string()),
            (Summarize, include_str!("../../templates/summarize.txt").to_string()),
            (Reflect, include_str!("../../templates/reflect.txt").to_string()),
            (Vote, include_str!("../../templates/vote.txt").to_string()),
        ]);
        Self {
            system: include_str!("../../templates/system.txt").to_string(),
            actions,
        }
    }

    /// Built-in templates overridden by any `<action>.txt` / `system.txt` in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        let read = |name: &str| -> Result<Option<String>, TemplateError> {
            let path = dir.join(name);
            match std::fs::read_to_string(&path) {
                Ok(t) => Ok(Some(t)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(TemplateError::Io { path: path.display().to_string(), source }),
            }
        };
        if let Some(t) = read("system.txt")? {
            set.system = t;
        }
        for kind in ActionKind::AGENT_ACTIONS {
            if let Some(t) = read(&file_name(kind))? {
                set.actions.insert(kind, t);
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn with_template(mut self, kind: ActionKind, text: impl Into<String>) -> Result<Self, TemplateError> {
        self.actions.insert(kind, text.into());
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        check("system", &self.system, &SYSTEM_REQUIRED)?;
        for (kind, text) in &self.actions {
            check(kind.as_str(), text, required_placeholders(*kind))?;
        }
        Ok(())
    }

    pub fn template(&self, kind: ActionKind) -> &str {
        self.actions.get(&kind).map_or("", String::as_str)
    }

    pub fn render_system(&self, vars: &PromptVars) -> String {
        fill(&self.system, vars)
    }

    pub fn render(&self, kind: ActionKind, vars: &PromptVars) -> String {
        fill(self.template(kind), vars)
    }
}

fn check(name: &str, text: &str, required: &[&'static str]) -> Result<(), TemplateError> {
    let used: BTreeSet<&str> = placeholder_re()
        .captures_iter(text)
        .map(|c| c.get(1).expect("group").as_str())
        .collect();
    for p in &used {
        if !PLACEHOLDERS.contains(p) {
            return Err(TemplateError::UnknownPlaceholder {
                template: name.to_string(),
                placeholder: p.to_string(),
            });
        }
    }
    for p in required {
        if !used.contains(p) {
            return Err(TemplateError::MissingPlaceholder {
                template: name.to_string(),
                placeholder: p,
            });
        }
    }
    Ok(())
}

fn fill(template: &str, vars: &PromptVars) -> String {
    placeholder_re()
        .replace_all(template, |c: &regex::Captures<'_>| {
            vars.get(&c[1]).map_or_else(|| c[0].to_string(), str::to_string)
        })
        .trim_end()
        .to_string()
}

pub fn render_scratch(name: &str, id: &CharacterId, scratch: &Scratch, overlay: Option<&str>) -> String {
    let mut out = format!("You are {name} (id `{id}`).\n{}", scratch.persona_text().trim());
    if !scratch.objective().trim().is_empty() {
        out.push_str(&format!("\nObjective: {}", scratch.objective().trim()));
    }
    if let Some(extra) = overlay.filter(|o| !o.trim().is_empty()) {
        out.push('\n');
        out.push_str(extra.trim());
    }
    out
}

pub fn render_beliefs(beliefs: &[Belief]) -> String {
    if beliefs.is_empty() {
        return "(none)".into();
    }
    beliefs
        .iter()
        .enumerate()
        .map(|(i, b)| format!("{}. {} (score {})", i + 1, b.statement, b.score))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_relationships(entries: &[RelationshipEntry]) -> String {
    if entries.is_empty() {
        return "(no judgements yet)".into();
    }
    entries
        .iter()
        .map(|r| {
            if r.judgement.is_empty() {
                format!("- {}: {}", r.object, r.score)
            } else {
                format!("- {}: {} ({})", r.object, r.score, r.judgement)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_memory(items: &[MemoryItem]) -> String {
    if items.is_empty() {
        return "(nothing yet)".into();
    }
    items
        .iter()
        .map(|m| format!("[round {}, {}] {}", m.round, m.stage, m.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_transcript(lines: &[TranscriptLine], names: &BTreeMap<CharacterId, String>) -> String {
    if lines.is_empty() {
        return "(nothing has been said yet)".into();
    }
    lines
        .iter()
        .map(|l| {
            if l.metadata_only {
                l.text.clone()
            } else {
                let name = names.get(&l.speaker).map_or(l.speaker.as_str(), String::as_str);
                format!("{name} ({}): {}", l.speaker, l.text)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_candidates(ids: &[CharacterId], allow_none: bool) -> String {
    let mut parts: Vec<&str> = ids.iter().map(CharacterId::as_str).collect();
    if allow_none {
        parts.push("none");
    }
    parts.join(", ")
}

/// Public roster: every character with role and camp, then resources.
pub fn render_objects(story: &StoryConfig, world: &WorldState) -> String {
    let mut out = Vec::new();
    for c in &story.characters {
        let role = if c.is_principal { "principal" } else { "supporting" };
        let camp = world.camp_of(&c.id).map(|k| k.id.to_string()).unwrap_or_default();
        out.push(format!("- {} (id `{}`), {role}, camp {camp}", c.name, c.id));
    }
    if !world.resources.is_empty() {
        out.push(String::from("Resources:"));
        for r in world.resources.values() {
            let owner = r.owner.as_ref().map_or_else(|| "nobody".to_string(), |o| o.to_string());
            let mut line = format!("- {} (held by {owner}, impact {})", r.id, r.impact);
            if !r.description.is_empty() {
                line.push_str(&format!(": {}", r.description));
            }
            out.push(line);
        }
    }
    out.join("\n")
}
