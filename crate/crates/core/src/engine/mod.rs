//! The round loop: update, private chatting, confidential meeting and group
//! chatting per round, then one settlement.

pub mod human;
pub mod schedule;
pub mod settle;
mod stages;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::prompt::{
    render_beliefs, render_candidates, render_memory, render_objects, render_relationships, render_scratch,
    render_transcript,
};
use crate::actions::{build_request, ActionResult, Roster, TemplateError, TemplateSet};
use crate::backend::{Attempt, BackendError, ChatBackend, ChatRequest, ChatTag, RetryError, SamplingParams, Structured, UsageLedger};
use crate::model::{
    action_visible_to, validate_story, ActionKind, ActionRecord, ActorKind, CharacterId, LogLine, ModelError,
    Payload, RecordStatus, RunHeader, RunLog, SimTime, StageId, StoryConfig, TranscriptLine, Violation,
    Visibility, VisibilityScope, WorldState,
};
use crate::persona::{MemoryFlowGraph, PersonaBounds, PersonaError, PersonaState, Scratch};

pub use human::{validate_human, HumanGateway, HumanPayload, PendingAction};
pub use settle::{PredicateOutcome, SettlementResult, TieBreak, TieBreakMethod};

/// Components that can be switched off for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Thinking,
    Planning,
    Memory,
    Reflection,
    Summarize,
    Private,
    Confidential,
    Group,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Thinking,
        Component::Planning,
        Component::Memory,
        Component::Reflection,
        Component::Summarize,
        Component::Private,
        Component::Confidential,
        Component::Group,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Thinking => "thinking",
            Component::Planning => "planning",
            Component::Memory => "memory",
            Component::Reflection => "reflection",
            Component::Summarize => "summarize",
            Component::Private => "private",
            Component::Confidential => "confidential",
            Component::Group => "group",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_lowercase();
        let s = s.strip_suffix("_chat").unwrap_or(&s);
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s || (s == "think" && *c == Component::Thinking) || (s == "plan" && *c == Component::Planning))
            .ok_or_else(|| format!("unknown component `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoScope {
    /// The voter's own visible history.
    #[default]
    OwnInfo,
    /// Every spoken line of the run, including chats the voter missed.
    AllInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteScope {
    pub info: InfoScope,
    pub self_forbidden: bool,
}

impl Default for VoteScope {
    fn default() -> Self {
        Self { info: InfoScope::OwnInfo, self_forbidden: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Temperatures {
    pub think: f64,
    pub perceive: f64,
    pub choose: f64,
    pub speak: f64,
    pub summarize: f64,
    pub reflect: f64,
    pub vote: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            think: 0.7,
            perceive: 0.7,
            choose: 0.0,
            speak: 0.7,
            summarize: 0.7,
            reflect: 0.0,
            vote: 0.0,
        }
    }
}

impl Temperatures {
    pub fn get(&self, kind: ActionKind) -> f64 {
        match kind {
            ActionKind::Think => self.think,
            ActionKind::Perceive => self.perceive,
            ActionKind::Choose => self.choose,
            ActionKind::Speak => self.speak,
            ActionKind::Summarize => self.summarize,
            ActionKind::Reflect => self.reflect,
            ActionKind::Vote => self.vote,
            ActionKind::CampChange | ActionKind::ResourceTransfer => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub rounds: u32,
    pub group_sub_rounds: u32,
    /// Utterances per private or confidential dialogue, alternating.
    pub dialogue_turns: u32,
    /// Sub-rounds before a group-chat line becomes visible to others.
    pub group_lag: u32,
    #[serde(skip_serializing_if = "BTreeSet::is_empty")]
    pub ablate: BTreeSet<Component>,
    /// Abort on exhausted retries instead of skipping the turn.
    pub strict: bool,
    pub max_attempts: u32,
    pub vote_scope: VoteScope,
    pub temperatures: Temperatures,
    pub max_output_tokens: u32,
    pub bounds: PersonaBounds,
    /// Extra instructions appended to a character's scratch in prompts only.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub scratch_overlay: BTreeMap<CharacterId, String>,
    /// Check every transcript line of every request against visibility.
    pub audit_visibility: bool,
    pub human_timeout_ms: u64,
    /// Debug aid: show human players their character's relationship scores.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub human_sees_relationships: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            rounds: 3,
            group_sub_rounds: 3,
            dialogue_turns: 4,
            group_lag: 1,
            ablate: BTreeSet::new(),
            strict: false,
            max_attempts: crate::backend::MAX_ATTEMPTS,
            vote_scope: VoteScope::default(),
            temperatures: Temperatures::default(),
            max_output_tokens: 512,
            bounds: PersonaBounds::default(),
            scratch_overlay: BTreeMap::new(),
            audit_visibility: true,
            human_timeout_ms: 300_000,
            human_sees_relationships: false,
        }
    }
}

impl RunOptions {
    pub fn enabled(&self, c: Component) -> bool {
        !self.ablate.contains(&c)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rounds == 0 {
            return Err("rounds must be positive".into());
        }
        if self.group_sub_rounds == 0 {
            return Err("group_sub_rounds must be positive".into());
        }
        if self.max_attempts == 0 || self.max_attempts > crate::backend::MAX_ATTEMPTS {
            return Err(format!("max_attempts must be in 1..={}", crate::backend::MAX_ATTEMPTS));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid story: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidStory(Vec<Violation>),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("{actor} exhausted {} attempts at {action}", attempts.len())]
    FormatExhausted {
        actor: CharacterId,
        action: ActionKind,
        attempts: Vec<Attempt>,
    },
    #[error("backend failed during {action} by {actor}: {source}")]
    Backend {
        actor: CharacterId,
        action: ActionKind,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("character `{0}` cannot be bound to a human: {1}")]
    Binding(CharacterId, String),
    #[error("the run is already settled")]
    AlreadySettled,
}

/// Receives log lines as they are produced.
pub trait RunSink: Send + Sync {
    fn on_line(&self, line: &LogLine);

    fn on_time(&self, _now: SimTime) {}
}

/// Result of checking assembled requests against visibility.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub requests_checked: u64,
    pub lines_checked: u64,
    /// Requests whose context was the full log by design (all-info votes).
    pub exempt_requests: u64,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    pub settlement: Option<SettlementResult>,
    /// Hash over every assembled request, in order.
    pub context_digest: String,
    pub audit: AuditReport,
    pub usage: UsageLedger,
    pub personas: BTreeMap<CharacterId, PersonaState>,
    pub world: WorldState,
}

pub(crate) enum Called<T> {
    Done(Structured<T>),
    Exhausted(Vec<Attempt>),
}

/// One prompt to assemble.
pub(crate) struct Ask {
    pub actor: CharacterId,
    pub kind: ActionKind,
    pub transcript: Vec<TranscriptLine>,
    pub focus: BTreeSet<CharacterId>,
    pub candidates: Vec<CharacterId>,
    pub allow_none: bool,
    pub stage_rules: String,
    pub thought: Option<String>,
    /// The transcript is the whole log by design; skip the visibility audit.
    pub exempt: bool,
}

impl Ask {
    pub fn new(actor: &CharacterId, kind: ActionKind, stage_rules: String) -> Self {
        Self {
            actor: actor.clone(),
            kind,
            transcript: Vec::new(),
            focus: BTreeSet::new(),
            candidates: Vec::new(),
            allow_none: false,
            stage_rules,
            thought: None,
            exempt: false,
        }
    }
}

pub struct Simulation {
    story: StoryConfig,
    world: WorldState,
    personas: BTreeMap<CharacterId, PersonaState>,
    backend: Arc<dyn ChatBackend>,
    opts: RunOptions,
    seed: u64,
    run_id: String,
    log: RunLog,
    templates: TemplateSet,
    roster: Roster,
    names: BTreeMap<CharacterId, String>,
    humans: BTreeMap<CharacterId, Arc<dyn HumanGateway>>,
    sink: Option<Arc<dyn RunSink>>,
    usage: UsageLedger,
    digest: Sha256,
    audit: AuditReport,
    now: SimTime,
    next_round: u32,
    pending_seq: u64,
    settlement: Option<SettlementResult>,
}

impl Simulation {
    pub fn new(
        story: StoryConfig,
        backend: Arc<dyn ChatBackend>,
        opts: RunOptions,
        seed: u64,
    ) -> Result<Self, EngineError> {
        let world = validate_story(&story).map_err(EngineError::InvalidStory)?;
        opts.validate().map_err(EngineError::InvalidOptions)?;
        let flow = story.flow.clone().unwrap_or_default();
        let personas = story
            .characters
            .iter()
            .map(|c| {
                let p = PersonaState::new(
                    c.id.clone(),
                    Scratch::new(c.scratch.clone(), c.objective.clone()),
                    &c.initial_beliefs,
                    flow.clone(),
                    opts.bounds,
                );
                (c.id.clone(), p)
            })
            .collect();
        let run_id = format!("{}-{seed}", story.id);
        let header = RunHeader {
            story_id: story.id.clone(),
            seed,
            story: story.clone(),
            options: opts.clone(),
        };
        Ok(Self {
            roster: Roster::from_story(&story),
            names: story.characters.iter().map(|c| (c.id.clone(), c.name.clone())).collect(),
            world,
            personas,
            backend,
            seed,
            run_id,
            log: RunLog::new(header),
            templates: TemplateSet::builtin(),
            humans: BTreeMap::new(),
            sink: None,
            usage: UsageLedger::default(),
            digest: Sha256::new(),
            audit: AuditReport::default(),
            now: SimTime::new(1, StageId::Update),
            next_round: 1,
            pending_seq: 0,
            settlement: None,
            story,
            opts,
        })
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Result<Self, EngineError> {
        templates.validate()?;
        self.templates = templates;
        Ok(self)
    }

    /// Routes `character`'s choose, speak and vote turns to a human.
    pub fn bind_human(&mut self, character: &CharacterId, gateway: Arc<dyn HumanGateway>) -> Result<(), EngineError> {
        if !self.world.characters.contains_key(character) {
            return Err(EngineError::Binding(character.clone(), "unknown character".into()));
        }
        if self.humans.contains_key(character) {
            return Err(EngineError::Binding(character.clone(), "already bound".into()));
        }
        if self.next_round > 1 || !self.log.is_empty() {
            return Err(EngineError::Binding(character.clone(), "the run has started".into()));
        }
        self.humans.insert(character.clone(), gateway);
        Ok(())
    }

    pub fn set_sink(&mut self, sink: Arc<dyn RunSink>) {
        self.sink = Some(sink);
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn options(&self) -> &RunOptions {
        &self.opts
    }

    pub fn story(&self) -> &StoryConfig {
        &self.story
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn persona(&self, id: &CharacterId) -> Option<&PersonaState> {
        self.personas.get(id)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn audit(&self) -> &AuditReport {
        &self.audit
    }

    pub fn is_human(&self, id: &CharacterId) -> bool {
        self.humans.contains_key(id)
    }

    /// Rounds completed so far.
    pub fn rounds_done(&self) -> u32 {
        self.next_round - 1
    }

    pub fn is_settled(&self) -> bool {
        self.settlement.is_some()
    }

    /// Runs the next round, or settles once every round has run.
    /// Returns false when there is nothing left to do.
    pub fn step(&mut self) -> Result<bool, EngineError> {
        if self.settlement.is_some() {
            return Ok(false);
        }
        if self.next_round <= self.opts.rounds {
            self.run_round()?;
        } else {
            self.settle()?;
        }
        Ok(true)
    }

    pub fn run(mut self) -> Result<RunOutcome, EngineError> {
        while self.step()? {}
        Ok(self.finish())
    }

    pub fn finish(mut self) -> RunOutcome {
        self.log.usage = self.usage.rows();
        for row in self.log.usage.clone() {
            self.emit(&LogLine::Usage(row));
        }
        RunOutcome {
            settlement: self.settlement.clone(),
            context_digest: hex::encode(self.digest.clone().finalize()),
            audit: self.audit.clone(),
            usage: self.usage.clone(),
            personas: self.personas,
            world: self.world,
            log: self.log,
        }
    }

    fn emit(&self, line: &LogLine) {
        if let Some(sink) = &self.sink {
            sink.on_line(line);
        }
    }

    pub(crate) fn set_time(&mut self, now: SimTime) {
        self.now = now;
        if let Some(sink) = &self.sink {
            sink.on_time(now);
        }
    }

    pub(crate) fn push_record(
        &mut self,
        actor: &CharacterId,
        kind: ActionKind,
        payload: Payload,
        visibility: VisibilityScope,
    ) -> u64 {
        let actor_kind = if kind.is_agent_action() && self.humans.contains_key(actor) {
            ActorKind::Human
        } else if kind.is_agent_action() {
            ActorKind::Model
        } else {
            ActorKind::Engine
        };
        self.push_record_as(actor, kind, payload, visibility, actor_kind)
    }

    pub(crate) fn push_record_as(
        &mut self,
        actor: &CharacterId,
        kind: ActionKind,
        payload: Payload,
        visibility: VisibilityScope,
        actor_kind: ActorKind,
    ) -> u64 {
        let record = ActionRecord {
            sequence_no: 0,
            round: self.now.round,
            stage: self.now.stage,
            actor: actor.clone(),
            actor_kind,
            action_kind: kind,
            payload,
            visibility,
        };
        let seq = self.log.append(record);
        let line = LogLine::Record(self.log.record(seq).expect("just appended").clone());
        self.emit(&line);
        seq
    }

    pub(crate) fn push_schedule(&mut self, entry: crate::model::ScheduleEntry) {
        self.emit(&LogLine::Schedule(entry.clone()));
        self.log.schedules.push(entry);
    }

    pub(crate) fn push_snapshot(&mut self, snap: crate::model::PersonaSnapshot) {
        self.emit(&LogLine::Snapshot(snap.clone()));
        self.log.persona_snapshots.push(snap);
    }

    /// Lines of the given records as `viewer` may see them now.
    pub(crate) fn visible_lines<'a, I>(&self, viewer: &CharacterId, records: I) -> Vec<TranscriptLine>
    where
        I: IntoIterator<Item = &'a ActionRecord>,
    {
        records
            .into_iter()
            .filter_map(|r| match action_visible_to(r, viewer, self.now, self.opts.group_lag) {
                Visibility::Full => Some(TranscriptLine::from_record(r)),
                Visibility::MetadataOnly => Some(TranscriptLine::metadata(r)),
                Visibility::Hidden => None,
            })
            .collect()
    }

    fn stage_params(&self, kind: ActionKind) -> SamplingParams {
        SamplingParams {
            temperature: self.opts.temperatures.get(kind),
            max_output_tokens: self.opts.max_output_tokens,
        }
    }

    /// Assembles the request for `ask`, auditing its transcript and folding
    /// it into the context digest.
    pub(crate) fn assemble(&mut self, ask: &Ask) -> ChatRequest {
        let persona = &self.personas[&ask.actor];
        let mut focus = ask.focus.clone();
        focus.extend(ask.candidates.iter().cloned());
        let ctx = persona.context_for(
            ask.kind,
            self.now.stage,
            &ask.transcript,
            &focus,
            self.opts.enabled(Component::Memory),
        );
        let spec = self.world.characters.get(&ask.actor).expect("known actor");
        let vars = crate::actions::PromptVars {
            progress_description: self.story.progress_description.trim().to_string(),
            object_descriptions: render_objects(&self.story, &self.world),
            scratch: render_scratch(
                &spec.name,
                &ask.actor,
                &ctx.scratch,
                self.opts.scratch_overlay.get(&ask.actor).map(String::as_str),
            ),
            beliefs: render_beliefs(&ctx.beliefs),
            relationships: render_relationships(&ctx.relationships),
            upstream_memory: render_memory(&ctx.memory),
            transcript: render_transcript(&ctx.transcript, &self.names),
            candidates: render_candidates(&ask.candidates, ask.allow_none),
            stage_rules: ask.stage_rules.clone(),
        };
        let request = build_request(
            self.templates.render_system(&vars),
            self.templates.render(ask.kind, &vars),
            ask.thought.as_deref(),
            self.stage_params(ask.kind),
            ChatTag {
                run_id: self.run_id.clone(),
                round: self.now.round,
                stage: self.now.stage,
                actor: ask.actor.clone(),
                action_kind: ask.kind,
                attempt: 1,
            },
        );
        self.audit_request(ask);
        self.digest
            .update(serde_json::to_vec(&request).expect("request serializes"));
        request
    }

    fn audit_request(&mut self, ask: &Ask) {
        if !self.opts.audit_visibility {
            return;
        }
        if ask.exempt {
            self.audit.exempt_requests += 1;
            return;
        }
        self.audit.requests_checked += 1;
        for line in &ask.transcript {
            self.audit.lines_checked += 1;
            let Some(seq) = line.source else { continue };
            let Some(record) = self.log.record(seq) else {
                self.audit.violations.push(format!("{} saw unknown record #{seq}", ask.actor));
                continue;
            };
            let vis = action_visible_to(record, &ask.actor, self.now, self.opts.group_lag);
            let ok = match vis {
                Visibility::Full => true,
                Visibility::MetadataOnly => line.metadata_only,
                Visibility::Hidden => false,
            };
            if !ok {
                self.audit.violations.push(format!(
                    "{} ({}) saw record #{seq} by {} as {:?} at {:?}",
                    ask.actor, ask.kind, record.actor, vis, self.now
                ));
            }
        }
    }

    /// Applies the strict/lenient policy and books usage.
    pub(crate) fn settle_call<T>(
        &mut self,
        actor: &CharacterId,
        kind: ActionKind,
        result: ActionResult<T>,
    ) -> Result<Called<T>, EngineError> {
        match result {
            Ok(s) => {
                self.usage.add(actor, kind, u64::from(s.calls), s.usage);
                Ok(Called::Done(s))
            }
            Err(e) => {
                self.usage.add(actor, kind, u64::from(e.calls()), e.usage());
                match e {
                    RetryError::FormatExhausted { attempts, .. } => {
                        if self.opts.strict {
                            Err(EngineError::FormatExhausted {
                                actor: actor.clone(),
                                action: kind,
                                attempts,
                            })
                        } else {
                            tracing::warn!(%actor, action = %kind, "format retries exhausted, skipping");
                            Ok(Called::Exhausted(attempts))
                        }
                    }
                    RetryError::Backend { error, .. } => Err(EngineError::Backend {
                        actor: actor.clone(),
                        action: kind,
                        source: error,
                    }),
                }
            }
        }
    }

    pub(crate) fn backend(&self) -> Arc<dyn ChatBackend> {
        Arc::clone(&self.backend)
    }

    pub(crate) fn next_pending_id(&mut self) -> u64 {
        self.pending_seq += 1;
        self.pending_seq
    }

    /// Memory flow graph in effect.
    pub fn flow(&self) -> MemoryFlowGraph {
        self.story.flow.clone().unwrap_or_default()
    }

    /// Moves a character to another camp and records it publicly. Locked
    /// characters and principals are refused with a private rejection record.
    pub fn apply_camp_change(
        &mut self,
        character: &CharacterId,
        target: &crate::model::CampId,
        reason: &str,
    ) -> Result<bool, EngineError> {
        let refusal = if self.world.is_principal(character) {
            Some("principal characters keep their camp".to_string())
        } else {
            match self.world.move_to_camp(character, target) {
                Ok(from) => {
                    let payload = Payload::text(format!("{character} left {from} for {target}"))
                        .with_field("from", from.as_str())
                        .with_field("to", target.as_str())
                        .with_field("reason", reason);
                    self.push_record_as(character, ActionKind::CampChange, payload, VisibilityScope::public(), ActorKind::Engine);
                    return Ok(true);
                }
                Err(ModelError::CampLocked(_)) => Some("character is locked to its camp".to_string()),
                Err(ModelError::SameCamp(..)) => return Ok(false),
                Err(e) => Some(e.to_string()),
            }
        };
        let why = refusal.unwrap_or_default();
        let payload = Payload::text(format!("{character} may not join {target}: {why}"))
            .with_field("to", target.as_str())
            .with_field("reason", reason)
            .with_status(RecordStatus::Rejected);
        self.push_record_as(
            character,
            ActionKind::CampChange,
            payload,
            VisibilityScope::participants_only([character.clone()]),
            ActorKind::Engine,
        );
        Ok(false)
    }
}
