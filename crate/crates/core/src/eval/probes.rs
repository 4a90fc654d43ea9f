//! Capability probes: first-try format compliance for update, choose and
//! vote prompts, and echo probes that ask a model to count what it was given.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::prompt::{render_beliefs, render_candidates, render_memory, render_objects, render_scratch, render_transcript};
use crate::actions::{
    build_request, first_integer, parse_choose, parse_free, parse_reflect, parse_vote, PromptVars, ReflectRules, Roster,
    TemplateSet, VoteRules,
};
use crate::backend::{BackendError, ChatBackend, ChatRequest, ChatTag, SamplingParams};
use crate::model::{validate_story, ActionKind, CampId, CharacterId, StageId, StoryConfig, TranscriptLine, WorldState};
use crate::persona::{Belief, MemoryItem, Scratch};
use crate::stories::load_preset;

pub const COMPLIANCE_TASKS: [&str; 3] = ["update", "choose", "vote"];
pub const ECHO_TASKS: [&str; 2] = ["dialogue_rounds", "memory_items"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskRate {
    pub passed: u32,
    /// Trials that reached the model; network failures are not counted.
    pub total: u32,
    pub rate: f64,
}

impl TaskRate {
    fn push(&mut self, ok: bool) {
        self.total += 1;
        self.passed += u32::from(ok);
        self.rate = f64::from(self.passed) / f64::from(self.total);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub backend: String,
    pub trials: u32,
    pub compliance: BTreeMap<String, TaskRate>,
    pub echo: BTreeMap<String, TaskRate>,
    pub network_errors: u32,
}

/// Fixed context every probe is rendered in.
struct ProbeContext {
    story: StoryConfig,
    world: WorldState,
    roster: Roster,
    templates: TemplateSet,
    actor: CharacterId,
}

impl ProbeContext {
    fn new() -> Self {
        let story = load_preset("inheritance").expect("bundled preset");
        let world = validate_story(&story).expect("bundled preset is valid");
        Self {
            roster: Roster::from_story(&story),
            templates: TemplateSet::builtin(),
            actor: "kendall".into(),
            story,
            world,
        }
    }

    fn others(&self) -> Vec<CharacterId> {
        self.world.ids().filter(|id| **id != self.actor).cloned().collect()
    }

    fn vars(&self, candidates: &[CharacterId], allow_none: bool, stage_rules: &str) -> PromptVars {
        let spec = self.story.character(&self.actor).expect("actor");
        let beliefs: Vec<Belief> = spec
            .initial_beliefs
            .iter()
            .map(|b| Belief { statement: b.statement.clone(), score: b.score })
            .collect();
        PromptVars {
            progress_description: self.story.progress_description.clone(),
            object_descriptions: render_objects(&self.story, &self.world),
            scratch: render_scratch(&spec.name, &self.actor, &Scratch::new(spec.scratch.clone(), spec.objective.clone()), None),
            beliefs: render_beliefs(&beliefs),
            relationships: "(none yet)".into(),
            upstream_memory: "(nothing yet)".into(),
            transcript: "(nothing said yet)".into(),
            candidates: render_candidates(candidates, allow_none),
            stage_rules: stage_rules.to_string(),
        }
    }

    fn request(&self, kind: ActionKind, stage: StageId, trial: u32, vars: &PromptVars, user: String) -> ChatRequest {
        let tag = ChatTag {
            run_id: "probe".into(),
            round: trial + 1,
            stage,
            actor: self.actor.clone(),
            action_kind: kind,
            attempt: 1,
        };
        let params = SamplingParams { temperature: 0.0, max_output_tokens: 512 };
        build_request(self.templates.render_system(vars), user, None, params, tag)
    }
}

enum Trial {
    Passed(bool),
    Network,
}

fn call(backend: &dyn ChatBackend, req: &ChatRequest) -> Result<String, Trial> {
    match backend.complete(req) {
        Ok(r) => Ok(r.content),
        Err(BackendError::Network(_)) => Err(Trial::Network),
        Err(e) => {
            tracing::warn!(error = %e, "probe call failed");
            Err(Trial::Passed(false))
        }
    }
}

fn compliance_trial(ctx: &ProbeContext, backend: &dyn ChatBackend, task: &str, trial: u32, rng: &mut ChaCha8Rng) -> Trial {
    let others = ctx.others();
    let (kind, stage, candidates, allow_none, rules) = match task {
        "update" => (ActionKind::Reflect, StageId::Update, others.clone(), false, "Round 2 of 3, update stage."),
        "choose" => {
            let mut pool = others.clone();
            pool.shuffle(rng);
            pool.truncate(rng.random_range(2..=pool.len()));
            pool.sort();
            (ActionKind::Choose, StageId::PrivateChat, pool, false, "Round 1 of 3, private chatting.")
        }
        _ => {
            let pcs: Vec<CharacterId> = ctx.world.principals().filter(|id| **id != ctx.actor).cloned().collect();
            (ActionKind::Vote, StageId::Settlement, pcs, false, "The game is over. Vote for the winner.")
        }
    };
    let vars = ctx.vars(&candidates, allow_none, rules);
    let req = ctx.request(kind, stage, trial, &vars, ctx.templates.render(kind, &vars));
    let raw = match call(backend, &req) {
        Ok(raw) => raw,
        Err(t) => return t,
    };
    let ok = match kind {
        ActionKind::Reflect => {
            let others: BTreeSet<CharacterId> = others.into_iter().collect();
            let camps: BTreeSet<CampId> = ctx.world.camps.keys().cloned().collect();
            let belief_count = ctx.story.character(&ctx.actor).map_or(0, |c| c.initial_beliefs.len());
            let rules = ReflectRules { actor: &ctx.actor, others: &others, belief_count, camps: &camps };
            parse_reflect(&raw, rules, &ctx.roster).is_ok()
        }
        ActionKind::Choose => parse_choose(&raw, &candidates, &ctx.roster).is_ok(),
        _ => {
            let rules = VoteRules { self_forbidden: true, allow_none };
            parse_vote(&raw, &candidates, &ctx.actor, rules, &ctx.roster).is_ok()
        }
    };
    Trial::Passed(ok)
}

const FILLER: [&str; 6] = [
    "We should talk about the board before Friday.",
    "I hear the bank is nervous about the credit line.",
    "You know where I stand on the sale.",
    "Let's keep this between us for now.",
    "Dad won't listen unless we move together.",
    "The numbers do not lie, whatever he says.",
];

/// Conversation with `rounds` exchanges and a memory list of `items` entries.
pub fn echo_context(rounds: u32, items: u32) -> (Vec<TranscriptLine>, Vec<MemoryItem>) {
    let speakers = [CharacterId::from("kendall"), CharacterId::from("logan")];
    let mut lines = Vec::new();
    for r in 0..rounds {
        for (i, s) in speakers.iter().enumerate() {
            lines.push(TranscriptLine {
                source: None,
                speaker: s.clone(),
                text: FILLER[(r as usize * 2 + i) % FILLER.len()].to_string(),
                metadata_only: false,
            });
        }
    }
    let memory = (0..items)
        .map(|i| MemoryItem {
            round: i + 1,
            stage: StageId::PrivateChat,
            text: FILLER[(i as usize + 3) % FILLER.len()].to_string(),
        })
        .collect();
    (lines, memory)
}

pub const ECHO_ROUNDS_QUESTION: &str =
    "A dialogue round is one line from each of the two speakers. How many dialogue rounds are in the conversation above? Reply with ANSWER: <number>.";
pub const ECHO_ITEMS_QUESTION: &str = "How many memory items are listed above? Reply with ANSWER: <number>.";

fn echo_trial(ctx: &ProbeContext, backend: &dyn ChatBackend, task: &str, trial: u32, rng: &mut ChaCha8Rng) -> Trial {
    let rounds = rng.random_range(1..=9);
    let items = rng.random_range(1..=9);
    let (lines, memory) = echo_context(rounds, items);
    let names: BTreeMap<CharacterId, String> =
        ctx.story.characters.iter().map(|c| (c.id.clone(), c.name.clone())).collect();
    let (body, question, truth) = if task == "dialogue_rounds" {
        (format!("Conversation:\n{}", render_transcript(&lines, &names)), ECHO_ROUNDS_QUESTION, rounds)
    } else {
        (format!("Memory items:\n{}", render_memory(&memory)), ECHO_ITEMS_QUESTION, items)
    };
    let vars = ctx.vars(&[], false, "");
    let req = ctx.request(ActionKind::Think, StageId::Update, trial, &vars, format!("{body}\n\n{question}"));
    match call(backend, &req) {
        Ok(raw) => {
            let answer = parse_free(&raw, "ANSWER").ok().and_then(|a| first_integer(&a));
            Trial::Passed(answer == Some(i64::from(truth)))
        }
        Err(t) => t,
    }
}

type TrialFn<'a> = &'a dyn Fn(&ProbeContext, &dyn ChatBackend, &str, u32, &mut ChaCha8Rng) -> Trial;

/// Runs `trials` of each probe. Every trial is a single call; no retries.
pub fn run_probes(backend: &dyn ChatBackend, trials: u32, seed: u64) -> ProbeResult {
    let ctx = ProbeContext::new();
    let mut network_errors = 0;
    let mut run = |tasks: &[&str], f: TrialFn<'_>| {
        let mut out = BTreeMap::new();
        for (i, task) in tasks.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut rate = TaskRate::default();
            for t in 0..trials {
                match f(&ctx, backend, task, t, &mut rng) {
                    Trial::Passed(ok) => rate.push(ok),
                    Trial::Network => network_errors += 1,
                }
            }
            out.insert(task.to_string(), rate);
        }
        out
    };
    let compliance = run(&COMPLIANCE_TASKS, &compliance_trial);
    let echo = run(&ECHO_TASKS, &echo_trial);
    ProbeResult { backend: backend.id().to_string(), trials, compliance, echo, network_errors }
}
