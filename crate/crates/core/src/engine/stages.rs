use std::collections::{BTreeMap, BTreeSet};

use super::schedule::{full_schedule, pc_schedule, stage_rng};
use super::settle::{tally_votes, PredicateOutcome, SettlementResult};
use super::{Ask, Called, Component, EngineError, InfoScope, PendingAction, Simulation};
use crate::actions::prompt::{render_scratch, render_transcript};
use crate::actions::{
    act_choose, act_perceive, act_reflect, act_speak, act_summarize, act_think, act_vote, ReflectRules, Speech,
    StructuredOutput, VoteRules,
};
use crate::model::{
    ActionKind, ActionRecord, CampId, CampKind, CharacterId, LogLine, Payload, RecordStatus, SimTime, StageId,
    TranscriptLine, VictoryKind, VisibilityScope,
};

/// Characters kept from a transcript when a summary falls back to raw text.
pub const SUMMARY_FALLBACK_CHARS: usize = 1200;

enum Spoken {
    Said(u64),
    Passed,
    Silent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ballot {
    For(CharacterId),
    Declined,
    Abstained,
}

fn attempts_payload(payload: Payload, calls: u32) -> Payload {
    if calls > 1 {
        payload.with_field("attempts", calls.to_string())
    } else {
        payload
    }
}

fn truncate_chars(text: &str, budget: usize) -> String {
    match text.char_indices().nth(budget) {
        Some((idx, _)) => format!("{}...", &text[..idx]),
        None => text.to_string(),
    }
}

impl Simulation {
    fn name(&self, id: &CharacterId) -> String {
        self.names.get(id).cloned().unwrap_or_else(|| id.to_string())
    }

    fn stage_rules(&self, stage: StageId, sub_round: u32) -> String {
        let r = self.now.round;
        let n = self.opts.rounds;
        match stage {
            StageId::Update => format!(
                "Round {r} of {n}, update stage: take stock of the other characters and plan your moves."
            ),
            StageId::PrivateChat => format!(
                "Round {r} of {n}, private chatting: a one-on-one conversation. Nobody else ever learns what is said."
            ),
            StageId::ConfidentialMeeting => format!(
                "Round {r} of {n}, confidential meeting: a one-on-one conversation. Everyone learns who met whom, but not what was said."
            ),
            StageId::GroupChat => format!(
                "Round {r} of {n}, group chatting, sub-round {sub_round} of {}: everyone hears you. Others see your line from the next sub-round. Write PASS instead of SPEECH to stay silent.",
                self.opts.group_sub_rounds
            ),
            StageId::Settlement => "The game is over. Vote for the character you judge the winner. You may not vote for yourself.".to_string(),
        }
    }

    fn others_of(&self, actor: &CharacterId) -> BTreeSet<CharacterId> {
        self.world.ids().filter(|id| *id != actor).cloned().collect()
    }

    /// Runs one full round: update, then whichever chat stages are enabled.
    pub fn run_round(&mut self) -> Result<(), EngineError> {
        if self.settlement.is_some() {
            return Err(EngineError::AlreadySettled);
        }
        let round = self.next_round;
        if round > self.opts.rounds {
            return Err(EngineError::InvalidOptions(format!("all {} rounds have run", self.opts.rounds)));
        }
        self.world.round = round;
        self.update_stage(round)?;
        if self.opts.enabled(Component::Private) {
            self.chat_stage(round, StageId::PrivateChat)?;
        }
        if self.opts.enabled(Component::Confidential) {
            self.chat_stage(round, StageId::ConfidentialMeeting)?;
        }
        if self.opts.enabled(Component::Group) {
            self.run_group_stage(round)?;
        }
        self.next_round += 1;
        Ok(())
    }

    fn update_stage(&mut self, round: u32) -> Result<(), EngineError> {
        self.set_time(SimTime::new(round, StageId::Update));
        let entry = full_schedule(&self.world, self.seed, round, StageId::Update);
        self.push_schedule(entry.clone());
        for actor in &entry.order {
            let others = self.others_of(actor);
            if !self.is_human(actor) {
                self.reflect(round, actor, &others)?;
            }
            self.personas
                .get_mut(actor)
                .expect("persona")
                .ensure_relationships(others.iter());
            if !self.is_human(actor) && self.opts.enabled(Component::Planning) {
                self.perceive(round, actor)?;
            }
        }
        let ids: Vec<CharacterId> = self.world.ids().cloned().collect();
        for id in ids {
            let snap = self.personas[&id].snapshot(round);
            self.push_snapshot(snap);
        }
        Ok(())
    }

    fn reflect(&mut self, round: u32, actor: &CharacterId, others: &BTreeSet<CharacterId>) -> Result<(), EngineError> {
        if !self.opts.enabled(Component::Reflection) {
            return Ok(());
        }
        let initial = round == 1;
        let rules = if initial {
            format!(
                "Round 1 of {}, update stage: the game is starting. Give your first impression of every other character.",
                self.opts.rounds
            )
        } else {
            self.stage_rules(StageId::Update, 0)
        };
        let mut ask = Ask::new(actor, ActionKind::Reflect, rules);
        ask.candidates = others.iter().cloned().collect();
        ask.focus = others.clone();
        let request = self.assemble(&ask);
        let camps: BTreeSet<CampId> = self.world.camps.keys().cloned().collect();
        let belief_count = self.personas[actor].beliefs().len();
        let backend = self.backend();
        let result = act_reflect(
            &*backend,
            request,
            self.opts.max_attempts,
            ReflectRules { actor, others, belief_count, camps: &camps },
            &self.roster,
        );
        let scope = VisibilityScope::participants_only([actor.clone()]);
        match self.settle_call(actor, ActionKind::Reflect, result)? {
            Called::Done(s) => {
                let mut out = s.value;
                let persona = self.personas.get_mut(actor).expect("persona");
                let mut payload = Payload::text(out.insights.clone());
                for u in &out.relationships {
                    match persona.apply_relationship_update(&u.object, u.score, u.judgement.clone(), round) {
                        Ok(entry) => {
                            payload = payload.with_field(&format!("rel.{}", u.object), entry.score.to_string());
                        }
                        Err(e) => out.dropped.push(format!("REL {}: {e}", u.object)),
                    }
                }
                for (idx, score) in &out.beliefs {
                    match persona.apply_belief_update(*idx, *score, round) {
                        Ok(applied) => payload = payload.with_field(&format!("belief.{}", idx + 1), applied.to_string()),
                        Err(e) => out.dropped.push(format!("BELIEF {}: {e}", idx + 1)),
                    }
                }
                if !out.insights.is_empty() {
                    persona.append_memory(ActionKind::Reflect, round, StageId::Update, out.insights.clone());
                }
                if initial {
                    payload = payload.with_field("initial", "true");
                }
                if !out.dropped.is_empty() {
                    tracing::info!(%actor, dropped = ?out.dropped, "reflection lines dropped");
                    payload = payload.with_field("dropped", out.dropped.join("; "));
                }
                self.push_record(actor, ActionKind::Reflect, attempts_payload(payload, s.calls), scope);
                if let Some(p) = out.camp {
                    if self.world.camp_of(actor).map(|c| c.id != p.camp).unwrap_or(false) {
                        self.apply_camp_change(actor, &p.camp, &p.reason)?;
                    }
                }
            }
            Called::Exhausted(attempts) => {
                let payload = Payload::text("")
                    .with_field("attempts", attempts.len().to_string())
                    .with_status(RecordStatus::Failed);
                self.push_record(actor, ActionKind::Reflect, payload, scope);
            }
        }
        Ok(())
    }

    fn perceive(&mut self, round: u32, actor: &CharacterId) -> Result<(), EngineError> {
        let ask = Ask::new(actor, ActionKind::Perceive, self.stage_rules(StageId::Update, 0));
        let request = self.assemble(&ask);
        let backend = self.backend();
        let result = act_perceive(&*backend, request, self.opts.max_attempts);
        let scope = VisibilityScope::participants_only([actor.clone()]);
        match self.settle_call(actor, ActionKind::Perceive, result)? {
            Called::Done(s) => {
                self.personas
                    .get_mut(actor)
                    .expect("persona")
                    .append_memory(ActionKind::Perceive, round, StageId::Update, s.value.clone());
                self.push_record(actor, ActionKind::Perceive, attempts_payload(Payload::text(s.value), s.calls), scope);
            }
            Called::Exhausted(attempts) => {
                // the previous plan stays in the slot
                let payload = Payload::text("")
                    .with_field("attempts", attempts.len().to_string())
                    .with_status(RecordStatus::Failed);
                self.push_record(actor, ActionKind::Perceive, payload, scope);
            }
        }
        Ok(())
    }

    /// A private thought before choose or speak. Never shared.
    fn think(&mut self, actor: &CharacterId, transcript: &[TranscriptLine], rules: &str) -> Result<Option<String>, EngineError> {
        if !self.opts.enabled(Component::Thinking) || self.is_human(actor) {
            return Ok(None);
        }
        let mut ask = Ask::new(actor, ActionKind::Think, rules.to_string());
        ask.transcript = transcript.to_vec();
        let request = self.assemble(&ask);
        let backend = self.backend();
        let result = act_think(&*backend, request, self.opts.max_attempts);
        let scope = VisibilityScope::participants_only([actor.clone()]);
        match self.settle_call(actor, ActionKind::Think, result)? {
            Called::Done(s) => {
                self.push_record(actor, ActionKind::Think, attempts_payload(Payload::text(s.value.clone()), s.calls), scope);
                Ok(Some(s.value))
            }
            Called::Exhausted(attempts) => {
                let payload = Payload::text("")
                    .with_field("attempts", attempts.len().to_string())
                    .with_status(RecordStatus::Failed);
                self.push_record(actor, ActionKind::Think, payload, scope);
                Ok(None)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn human_turn(
        &mut self,
        actor: &CharacterId,
        kind: ActionKind,
        transcript: Vec<TranscriptLine>,
        candidates: Vec<CharacterId>,
        allow_pass: bool,
        vote_rules: Option<VoteRules>,
        instructions: String,
    ) -> Option<StructuredOutput> {
        let gateway = self.humans.get(actor).cloned()?;
        let mut ask = Ask::new(actor, kind, instructions.clone());
        ask.transcript = transcript.clone();
        self.audit_request(&ask);
        let persona = &self.personas[actor];
        let spec = &self.world.characters[actor];
        let pending = PendingAction {
            id: self.pending_seq + 1,
            character: actor.clone(),
            action_kind: kind,
            round: self.now.round,
            stage: self.now.stage,
            scratch: render_scratch(&spec.name, actor, persona.scratch(), None),
            beliefs: persona.beliefs().to_vec(),
            relationships: self
                .opts
                .human_sees_relationships
                .then(|| persona.relationships().map(|r| (r.object.clone(), r.score)).collect()),
            transcript,
            candidates: candidates.clone(),
            allow_pass,
            vote_rules,
            instructions,
            timeout_ms: self.opts.human_timeout_ms,
        };
        self.next_pending_id();
        let out = gateway.await_action(pending)?;
        // the gateway validates; check again so a faulty one cannot corrupt the run
        let valid = match (&out, kind) {
            (StructuredOutput::Choice(c), ActionKind::Choose) => candidates.contains(&c.target),
            (StructuredOutput::Utterance { text }, ActionKind::Speak) => !text.trim().is_empty(),
            (StructuredOutput::Pass, ActionKind::Speak) => allow_pass,
            (StructuredOutput::Vote(v), ActionKind::Vote) => match &v.target {
                Some(t) => candidates.contains(t),
                None => vote_rules.is_some_and(|r| r.allow_none),
            },
            _ => false,
        };
        valid.then_some(out)
    }

    fn chat_stage(&mut self, round: u32, stage: StageId) -> Result<(), EngineError> {
        self.set_time(SimTime::new(round, stage));
        let entry = pc_schedule(&self.world, self.seed, round, stage);
        self.push_schedule(entry.clone());
        for initiator in &entry.order {
            let candidates: Vec<CharacterId> = self.others_of(initiator).into_iter().collect();
            let Some(partner) = self.choose_partner(round, stage, initiator, &candidates)? else {
                continue;
            };
            self.run_dialogue(initiator, &partner, stage)?;
        }
        Ok(())
    }

    fn choose_partner(
        &mut self,
        round: u32,
        stage: StageId,
        actor: &CharacterId,
        candidates: &[CharacterId],
    ) -> Result<Option<CharacterId>, EngineError> {
        let rules = self.stage_rules(stage, 0);
        let scope = VisibilityScope::participants_only([actor.clone()]);
        if self.is_human(actor) {
            let out = self.human_turn(actor, ActionKind::Choose, Vec::new(), candidates.to_vec(), false, None, rules);
            return Ok(match out {
                Some(StructuredOutput::Choice(c)) => {
                    let payload = Payload::text(c.strategy.clone()).with_field("target", c.target.as_str());
                    self.push_record(actor, ActionKind::Choose, payload, scope);
                    Some(c.target)
                }
                _ => {
                    let payload = Payload::text("").with_field("reason", "timeout").with_status(RecordStatus::Skipped);
                    self.push_record(actor, ActionKind::Choose, payload, scope);
                    None
                }
            });
        }
        let thought = self.think(actor, &[], &rules)?;
        let mut ask = Ask::new(actor, ActionKind::Choose, rules);
        ask.candidates = candidates.to_vec();
        ask.thought = thought;
        let request = self.assemble(&ask);
        let backend = self.backend();
        let result = act_choose(&*backend, request, self.opts.max_attempts, candidates, &self.roster);
        match self.settle_call(actor, ActionKind::Choose, result)? {
            Called::Done(s) => {
                let c = s.value;
                self.personas.get_mut(actor).expect("persona").append_memory(
                    ActionKind::Choose,
                    round,
                    stage,
                    format!("Talk with {}: {}", c.target, c.strategy),
                );
                let payload = Payload::text(c.strategy).with_field("target", c.target.as_str());
                self.push_record(actor, ActionKind::Choose, attempts_payload(payload, s.calls), scope);
                Ok(Some(c.target))
            }
            Called::Exhausted(attempts) => {
                let payload = Payload::text("")
                    .with_field("attempts", attempts.len().to_string())
                    .with_status(RecordStatus::Skipped);
                self.push_record(actor, ActionKind::Choose, payload, scope);
                Ok(None)
            }
        }
    }

    fn records_of(&self, seqs: &[u64]) -> Vec<ActionRecord> {
        seqs.iter().filter_map(|s| self.log.record(*s).cloned()).collect()
    }

    /// A two-person dialogue of `dialogue_turns` alternating utterances,
    /// initiator first, after which both participants summarize. Returns the
    /// sequence numbers of the spoken lines.
    pub fn run_dialogue(
        &mut self,
        initiator: &CharacterId,
        partner: &CharacterId,
        stage: StageId,
    ) -> Result<Vec<u64>, EngineError> {
        if !self.world.is_principal(initiator) {
            return Err(EngineError::InvalidOptions(format!(
                "{initiator} is not a principal character and may not initiate a dialogue"
            )));
        }
        if initiator == partner || !self.world.characters.contains_key(partner) {
            return Err(EngineError::InvalidOptions(format!("{initiator} cannot talk with {partner}")));
        }
        if !matches!(stage, StageId::PrivateChat | StageId::ConfidentialMeeting) {
            return Err(EngineError::InvalidOptions(format!("no dialogues during {stage}")));
        }
        let round = self.now.round;
        self.set_time(SimTime::new(round, stage));
        if stage == StageId::ConfidentialMeeting {
            let note = format!("({initiator} met {partner})");
            self.push_record(
                initiator,
                ActionKind::Choose,
                Payload::text(note),
                VisibilityScope::metadata_public([initiator.clone(), partner.clone()]),
            );
        }
        let scope = VisibilityScope::participants_only([initiator.clone(), partner.clone()]);
        let mut said = Vec::new();
        for turn in 0..self.opts.dialogue_turns {
            let (speaker, listener) = if turn % 2 == 0 { (initiator, partner) } else { (partner, initiator) };
            let records = self.records_of(&said);
            let transcript = self.visible_lines(speaker, &records);
            let rules = format!(
                "{} You are talking with {} ({listener}).",
                self.stage_rules(stage, 0),
                self.name(listener)
            );
            let focus = BTreeSet::from([listener.clone()]);
            if let Spoken::Said(seq) = self.speak(speaker, transcript, rules, scope.clone(), false, focus)? {
                said.push(seq);
            }
        }
        for p in [initiator, partner] {
            self.summarize(p, &said, stage)?;
        }
        Ok(said)
    }

    fn speak(
        &mut self,
        speaker: &CharacterId,
        transcript: Vec<TranscriptLine>,
        rules: String,
        scope: VisibilityScope,
        allow_pass: bool,
        focus: BTreeSet<CharacterId>,
    ) -> Result<Spoken, EngineError> {
        let round = self.now.round;
        let stage = self.now.stage;
        if self.is_human(speaker) {
            let out = self.human_turn(speaker, ActionKind::Speak, transcript, Vec::new(), allow_pass, None, rules);
            return Ok(match out {
                Some(StructuredOutput::Utterance { text }) => {
                    Spoken::Said(self.push_record(speaker, ActionKind::Speak, Payload::text(text), scope))
                }
                Some(StructuredOutput::Pass) => {
                    let payload = Payload::text("PASS").with_status(RecordStatus::Pass);
                    self.push_record(speaker, ActionKind::Speak, payload, scope);
                    Spoken::Passed
                }
                _ => {
                    let payload = Payload::text("").with_field("reason", "timeout").with_status(RecordStatus::Skipped);
                    self.push_record(speaker, ActionKind::Speak, payload, scope);
                    Spoken::Silent
                }
            });
        }
        let thought = self.think(speaker, &transcript, &rules)?;
        let mut ask = Ask::new(speaker, ActionKind::Speak, rules);
        ask.transcript = transcript;
        ask.focus = focus;
        ask.thought = thought;
        let request = self.assemble(&ask);
        let backend = self.backend();
        let result = act_speak(&*backend, request, self.opts.max_attempts, allow_pass);
        Ok(match self.settle_call(speaker, ActionKind::Speak, result)? {
            Called::Done(s) => match s.value {
                Speech::Say(text) => {
                    self.personas
                        .get_mut(speaker)
                        .expect("persona")
                        .append_memory(ActionKind::Speak, round, stage, text.clone());
                    let seq = self.push_record(speaker, ActionKind::Speak, attempts_payload(Payload::text(text), s.calls), scope);
                    Spoken::Said(seq)
                }
                Speech::Pass => {
                    let payload = Payload::text("PASS").with_status(RecordStatus::Pass);
                    self.push_record(speaker, ActionKind::Speak, attempts_payload(payload, s.calls), scope);
                    Spoken::Passed
                }
            },
            Called::Exhausted(attempts) => {
                let payload = Payload::text("")
                    .with_field("attempts", attempts.len().to_string())
                    .with_status(RecordStatus::Skipped);
                self.push_record(speaker, ActionKind::Speak, payload, scope);
                Spoken::Silent
            }
        })
    }

    fn summarize(&mut self, actor: &CharacterId, said: &[u64], stage: StageId) -> Result<(), EngineError> {
        if self.is_human(actor) {
            return Ok(());
        }
        let round = self.now.round;
        let records = self.records_of(said);
        let transcript = self.visible_lines(actor, &records);
        self.summarize_lines(actor, transcript, round, stage)
    }

    fn summarize_lines(
        &mut self,
        actor: &CharacterId,
        transcript: Vec<TranscriptLine>,
        round: u32,
        stage: StageId,
    ) -> Result<(), EngineError> {
        let raw = render_transcript(&transcript, &self.names);
        if !self.opts.enabled(Component::Summarize) {
            self.personas
                .get_mut(actor)
                .expect("persona")
                .append_memory(ActionKind::Summarize, round, stage, raw);
            return Ok(());
        }
        let mut ask = Ask::new(actor, ActionKind::Summarize, String::new());
        ask.transcript = transcript;
        let request = self.assemble(&ask);
        let backend = self.backend();
        let result = act_summarize(&*backend, request, self.opts.max_attempts);
        let scope = VisibilityScope::participants_only([actor.clone()]);
        let (text, payload) = match self.settle_call(actor, ActionKind::Summarize, result)? {
            Called::Done(s) => (s.value.clone(), attempts_payload(Payload::text(s.value), s.calls)),
            Called::Exhausted(attempts) => {
                let text = truncate_chars(&raw, SUMMARY_FALLBACK_CHARS);
                let payload = Payload::text(text.clone())
                    .with_field("attempts", attempts.len().to_string())
                    .with_status(RecordStatus::Degraded);
                (text, payload)
            }
        };
        self.personas
            .get_mut(actor)
            .expect("persona")
            .append_memory(ActionKind::Summarize, round, stage, text);
        self.push_record(actor, ActionKind::Summarize, payload, scope);
        Ok(())
    }

    /// R sub-rounds in which everyone may speak or pass; speakers summarize at the end.
    pub fn run_group_stage(&mut self, round: u32) -> Result<(), EngineError> {
        self.set_time(SimTime::group(round, 1));
        let entry = full_schedule(&self.world, self.seed, round, StageId::GroupChat);
        self.push_schedule(entry.clone());
        let mut said = Vec::new();
        let mut speakers = BTreeSet::new();
        for sub in 1..=self.opts.group_sub_rounds {
            self.set_time(SimTime::group(round, sub));
            for actor in &entry.order {
                let records = self.records_of(&said);
                let transcript = self.visible_lines(actor, &records);
                let rules = self.stage_rules(StageId::GroupChat, sub);
                let scope = VisibilityScope::group_lagged(actor.clone(), sub);
                if let Spoken::Said(seq) = self.speak(actor, transcript, rules, scope, true, BTreeSet::new())? {
                    said.push(seq);
                    speakers.insert(actor.clone());
                }
            }
        }
        // every line is visible once the lag has run out
        self.set_time(SimTime::group(round, self.opts.group_sub_rounds + self.opts.group_lag));
        for actor in entry.order.iter().filter(|a| speakers.contains(*a)) {
            self.summarize(actor, &said, StageId::GroupChat)?;
        }
        Ok(())
    }

    fn vote_transcript(&self, voter: &CharacterId) -> (Vec<TranscriptLine>, bool) {
        let spoken = |r: &&ActionRecord| {
            (r.action_kind == ActionKind::Speak && r.payload.status == RecordStatus::Ok)
                || (r.action_kind == ActionKind::Choose && r.visibility.kind == crate::model::VisibilityKind::MetadataPublic)
                || (r.action_kind == ActionKind::CampChange && r.payload.status == RecordStatus::Ok)
        };
        match self.opts.vote_scope.info {
            InfoScope::OwnInfo => (self.visible_lines(voter, self.log.records().iter().filter(spoken)), false),
            InfoScope::AllInfo => (
                self.log.records().iter().filter(spoken).map(TranscriptLine::from_record).collect(),
                true,
            ),
        }
    }

    fn vote(
        &mut self,
        voter: &CharacterId,
        eligible: &[CharacterId],
        rules: VoteRules,
        instructions: String,
        purpose: &str,
    ) -> Result<Ballot, EngineError> {
        let round = self.now.round;
        let candidates: Vec<CharacterId> = eligible
            .iter()
            .filter(|c| !(rules.self_forbidden && *c == voter))
            .cloned()
            .collect();
        let scope = VisibilityScope::participants_only([voter.clone()]);
        let (transcript, exempt) = self.vote_transcript(voter);
        let (ballot, payload) = if self.is_human(voter) {
            let out = self.human_turn(
                voter,
                ActionKind::Vote,
                transcript,
                candidates.clone(),
                false,
                Some(rules),
                instructions,
            );
            match out {
                Some(StructuredOutput::Vote(v)) => {
                    let ballot = v.target.clone().map_or(Ballot::Declined, Ballot::For);
                    (ballot, Payload::text(v.reason).with_field("target", v.target.map_or("none".into(), |t| t.to_string())))
                }
                _ => (
                    Ballot::Abstained,
                    Payload::text("").with_field("reason", "timeout").with_status(RecordStatus::Abstain),
                ),
            }
        } else {
            let mut ask = Ask::new(voter, ActionKind::Vote, instructions);
            ask.transcript = transcript;
            ask.exempt = exempt;
            ask.candidates = candidates.clone();
            ask.allow_none = rules.allow_none;
            let request = self.assemble(&ask);
            let backend = self.backend();
            let result = act_vote(&*backend, request, self.opts.max_attempts, &candidates, voter, rules, &self.roster);
            match self.settle_call(voter, ActionKind::Vote, result)? {
                Called::Done(s) => {
                    let v = s.value;
                    let label = v.target.as_ref().map_or("none".to_string(), |t| t.to_string());
                    self.personas.get_mut(voter).expect("persona").append_memory(
                        ActionKind::Vote,
                        round,
                        StageId::Settlement,
                        format!("{purpose}: {label}. {}", v.reason),
                    );
                    let ballot = v.target.map_or(Ballot::Declined, Ballot::For);
                    (ballot, attempts_payload(Payload::text(v.reason).with_field("target", label), s.calls))
                }
                Called::Exhausted(attempts) => (
                    Ballot::Abstained,
                    Payload::text("")
                        .with_field("attempts", attempts.len().to_string())
                        .with_status(RecordStatus::Abstain),
                ),
            }
        };
        self.push_record(voter, ActionKind::Vote, payload.with_field("purpose", purpose), scope);
        Ok(ballot)
    }

    /// Final summaries, the PC vote, and the story's victory predicate.
    pub fn settle(&mut self) -> Result<SettlementResult, EngineError> {
        if self.settlement.is_some() {
            return Err(EngineError::AlreadySettled);
        }
        let round = self.opts.rounds;
        self.set_time(SimTime::new(round, StageId::Settlement));
        let entry = pc_schedule(&self.world, self.seed, round, StageId::Settlement);
        self.push_schedule(entry.clone());

        for pc in &entry.order {
            if self.is_human(pc) {
                continue;
            }
            let spoken: Vec<ActionRecord> = self
                .log
                .records()
                .iter()
                .filter(|r| r.action_kind == ActionKind::Speak && r.payload.status == RecordStatus::Ok)
                .cloned()
                .collect();
            let transcript = self.visible_lines(pc, &spoken);
            self.summarize_lines(pc, transcript, round, StageId::Settlement)?;
        }

        let pcs: Vec<CharacterId> = self.world.principals().cloned().collect();
        let rules = VoteRules { self_forbidden: self.opts.vote_scope.self_forbidden, allow_none: false };
        let mut votes = BTreeMap::new();
        for voter in &entry.order {
            let instructions = if rules.self_forbidden {
                self.stage_rules(StageId::Settlement, 0)
            } else {
                "The game is over. Vote for the character you judge the winner.".to_string()
            };
            let ballot = self.vote(voter, &pcs, rules, instructions, "winner")?;
            votes.insert(voter.clone(), match ballot {
                Ballot::For(t) => Some(t),
                Ballot::Declined | Ballot::Abstained => None,
            });
        }
        let mut rng = stage_rng(self.seed, self.opts.rounds + 1, StageId::Settlement);
        let world = &self.world;
        let (tally, vote_winner, tie_break) =
            tally_votes(&votes, |id| world.compute_influence(id).unwrap_or(0), &mut rng);

        let (predicate, fallback_winner) = self.victory_predicate()?;
        let result = SettlementResult {
            votes,
            tally,
            no_winner: vote_winner.is_none(),
            vote_winner,
            tie_break,
            predicate,
            fallback_winner,
        };
        self.log.settlement = Some(result.clone());
        if let Some(sink) = &self.sink {
            sink.on_line(&LogLine::Settlement(result.clone()));
        }
        self.settlement = Some(result.clone());
        Ok(result)
    }

    fn victory_predicate(&mut self) -> Result<(Option<PredicateOutcome>, Option<CharacterId>), EngineError> {
        let rule = self.story.victory.clone();
        let Some(decider) = rule.decider.clone() else {
            return Ok((None, None));
        };
        match rule.kind {
            VictoryKind::OpenVote => Ok((None, None)),
            VictoryKind::Concession | VictoryKind::Casting => {
                let what = if rule.kind == VictoryKind::Casting { "the lead roles" } else { "control" };
                let ask = format!(
                    "The game is over. As {}, decide whether you concede {what} to one of the challengers. Name them in VOTE, or write VOTE: none to hold your position.",
                    self.name(&decider)
                );
                let rules = VoteRules { self_forbidden: true, allow_none: true };
                let ballot = self.vote(&decider, &rule.eligible, rules, ask, "concession")?;
                if let Ballot::For(pick) = ballot {
                    let outcome = PredicateOutcome {
                        kind: rule.kind,
                        decider,
                        held: true,
                        label: format!("conceded to {pick}"),
                        pick: Some(pick),
                    };
                    return Ok((Some(outcome), None));
                }
                let forced = format!(
                    "You held your position, but a successor for {what} must be named now. Name exactly one candidate in VOTE; none is not allowed."
                );
                let rules = VoteRules { self_forbidden: true, allow_none: false };
                let fallback = match self.vote(&decider, &rule.eligible, rules, forced, "fallback")? {
                    Ballot::For(t) => Some(t),
                    _ => None,
                };
                let outcome = PredicateOutcome {
                    kind: rule.kind,
                    decider,
                    held: false,
                    pick: None,
                    label: "held position".into(),
                };
                Ok((Some(outcome), fallback))
            }
            VictoryKind::Verdict => {
                let ask = "The trial is over. As judge, rule for one side by naming its principal in VOTE.".to_string();
                let rules = VoteRules { self_forbidden: true, allow_none: false };
                let ballot = self.vote(&decider, &rule.eligible, rules, ask, "verdict")?;
                let outcome = match ballot {
                    Ballot::For(pick) => {
                        let acquitted = self
                            .world
                            .camp_of(&pick)
                            .map(|c| c.kind == CampKind::Defense)
                            .unwrap_or(false);
                        PredicateOutcome {
                            kind: rule.kind,
                            decider,
                            held: acquitted,
                            pick: Some(pick),
                            label: if acquitted { "acquitted" } else { "convicted" }.into(),
                        }
                    }
                    _ => PredicateOutcome {
                        kind: rule.kind,
                        decider,
                        held: false,
                        pick: None,
                        label: "no verdict".into(),
                    },
                };
                Ok((Some(outcome), None))
            }
        }
    }
}
