//! Verbal-strategist persona: write-once scratch, drift-bounded beliefs,
//! append-only memory slots read through a fixed flow graph, and the
//! relationship matrix.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ActionKind, BeliefSpec, CharacterId, PersonaSnapshot, StageId, TranscriptLine};

/// Personality and objective. There is no mutable access after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scratch {
    persona_text: String,
    objective: String,
}

impl Scratch {
    pub fn new(persona_text: impl Into<String>, objective: impl Into<String>) -> Self {
        Self {
            persona_text: persona_text.into(),
            objective: objective.into(),
        }
    }

    pub fn persona_text(&self) -> &str {
        &self.persona_text
    }

    pub fn objective(&self) -> &str {
        &self.objective
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.persona_text.as_bytes());
        h.update([0u8]);
        h.update(self.objective.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Belief {
    pub statement: String,
    pub score: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreBounds {
    pub min: i32,
    pub max: i32,
    pub max_delta: i32,
}

impl ScoreBounds {
    pub fn clamp_range(&self, score: i32) -> i32 {
        score.clamp(self.min, self.max)
    }

    /// Limits the move from `old` to `proposed` by `max_delta`, then to the range.
    pub fn clamp_step(&self, old: i32, proposed: i32) -> i32 {
        let stepped = proposed.clamp(old.saturating_sub(self.max_delta), old.saturating_add(self.max_delta));
        self.clamp_range(stepped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaBounds {
    pub belief: ScoreBounds,
    pub relationship: ScoreBounds,
}

impl Default for PersonaBounds {
    fn default() -> Self {
        Self {
            belief: ScoreBounds { min: -10, max: 10, max_delta: 2 },
            relationship: ScoreBounds { min: -10, max: 10, max_delta: 3 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub round: u32,
    pub stage: StageId,
    pub text: String,
}

/// Timeline of one action's outputs. Items can be appended and read, nothing else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySlot {
    action_kind: ActionKind,
    items: Vec<MemoryItem>,
}

impl MemorySlot {
    pub fn new(action_kind: ActionKind) -> Self {
        Self { action_kind, items: Vec::new() }
    }

    pub fn action_kind(&self) -> ActionKind {
        self.action_kind
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn push(&mut self, item: MemoryItem) {
        self.items.push(item);
    }
}

/// Which slot each action reads. Think reads none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFlowGraph {
    pub edges: BTreeMap<ActionKind, ActionKind>,
    /// Edges that replace `edges` during the group-chat stage.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_overrides: BTreeMap<ActionKind, ActionKind>,
}

impl Default for MemoryFlowGraph {
    fn default() -> Self {
        use ActionKind::*;
        Self {
            edges: BTreeMap::from([
                (Perceive, Reflect),
                (Choose, Perceive),
                (Speak, Choose),
                (Summarize, Speak),
                (Reflect, Summarize),
                (Vote, Reflect),
            ]),
            group_overrides: BTreeMap::from([(Speak, Perceive)]),
        }
    }
}

impl MemoryFlowGraph {
    pub fn upstream(&self, action: ActionKind, stage: StageId) -> Option<ActionKind> {
        if stage == StageId::GroupChat {
            if let Some(up) = self.group_overrides.get(&action) {
                return Some(*up);
            }
        }
        self.edges.get(&action).copied()
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        for (from, to) in self.edges.iter().chain(self.group_overrides.iter()) {
            if !from.is_agent_action() || !to.is_agent_action() {
                problems.push(format!("edge {from} <- {to} names a non-agent action"));
            }
            if from == to {
                problems.push(format!("action {from} reads its own slot"));
            }
        }
        for action in ActionKind::AGENT_ACTIONS {
            if action != ActionKind::Think && !self.edges.contains_key(&action) {
                problems.push(format!("action {action} has no upstream slot"));
            }
        }
        if self.edges.contains_key(&ActionKind::Think) {
            problems.push("think reads no memory slot".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationshipEntry {
    pub subject: CharacterId,
    pub object: CharacterId,
    pub score: i32,
    pub judgement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PersonaError {
    #[error("belief index {0} out of range")]
    UnknownBelief(usize),
    #[error("belief {index} already updated in round {round}")]
    BeliefAlreadyUpdated { index: usize, round: u32 },
    #[error("relationship towards `{object}` already updated in round {round}")]
    RelationshipAlreadyUpdated { object: CharacterId, round: u32 },
    #[error("a character holds no relationship towards itself")]
    SelfRelation,
}

/// Everything an action may read, assembled by [`PersonaState::context_for`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContextBundle {
    pub scratch: Scratch,
    pub beliefs: Vec<Belief>,
    pub relationships: Vec<RelationshipEntry>,
    pub memory_source: Option<ActionKind>,
    pub memory: Vec<MemoryItem>,
    pub transcript: Vec<TranscriptLine>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaState {
    character: CharacterId,
    scratch: Scratch,
    beliefs: Vec<Belief>,
    slots: BTreeMap<ActionKind, MemorySlot>,
    relationships: BTreeMap<CharacterId, RelationshipEntry>,
    flow: MemoryFlowGraph,
    bounds: PersonaBounds,
    belief_updated: BTreeMap<usize, u32>,
    relationship_updated: BTreeMap<CharacterId, u32>,
}

impl PersonaState {
    pub fn new(
        character: CharacterId,
        scratch: Scratch,
        beliefs: &[BeliefSpec],
        flow: MemoryFlowGraph,
        bounds: PersonaBounds,
    ) -> Self {
        let beliefs = beliefs
            .iter()
            .map(|b| Belief {
                statement: b.statement.clone(),
                score: bounds.belief.clamp_range(b.score),
            })
            .collect();
        let slots = ActionKind::AGENT_ACTIONS
            .iter()
            .map(|k| (*k, MemorySlot::new(*k)))
            .collect();
        Self {
            character,
            scratch,
            beliefs,
            slots,
            relationships: BTreeMap::new(),
            flow,
            bounds,
            belief_updated: BTreeMap::new(),
            relationship_updated: BTreeMap::new(),
        }
    }

    pub fn character(&self) -> &CharacterId {
        &self.character
    }

    pub fn scratch(&self) -> &Scratch {
        &self.scratch
    }

    pub fn beliefs(&self) -> &[Belief] {
        &self.beliefs
    }

    pub fn bounds(&self) -> PersonaBounds {
        self.bounds
    }

    pub fn flow(&self) -> &MemoryFlowGraph {
        &self.flow
    }

    pub fn slot(&self, action: ActionKind) -> Option<&MemorySlot> {
        self.slots.get(&action)
    }

    pub fn relationship(&self, object: &CharacterId) -> Option<&RelationshipEntry> {
        self.relationships.get(object)
    }

    pub fn relationships(&self) -> impl Iterator<Item = &RelationshipEntry> {
        self.relationships.values()
    }

    /// Applies a bounded belief move. One update per belief per round.
    pub fn apply_belief_update(&mut self, index: usize, proposed: i32, round: u32) -> Result<i32, PersonaError> {
        let bounds = self.bounds.belief;
        let belief = self
            .beliefs
            .get_mut(index)
            .ok_or(PersonaError::UnknownBelief(index))?;
        if self.belief_updated.get(&index) == Some(&round) {
            return Err(PersonaError::BeliefAlreadyUpdated { index, round });
        }
        belief.score = bounds.clamp_step(belief.score, proposed);
        self.belief_updated.insert(index, round);
        Ok(belief.score)
    }

    /// Applies a bounded relationship move. The first entry towards a
    /// character is an initial prediction and only range-clamped.
    pub fn apply_relationship_update(
        &mut self,
        object: &CharacterId,
        proposed: i32,
        judgement: impl Into<String>,
        round: u32,
    ) -> Result<RelationshipEntry, PersonaError> {
        if object == &self.character {
            return Err(PersonaError::SelfRelation);
        }
        if self.relationship_updated.get(object) == Some(&round) {
            return Err(PersonaError::RelationshipAlreadyUpdated {
                object: object.clone(),
                round,
            });
        }
        let bounds = self.bounds.relationship;
        let score = match self.relationships.get(object) {
            Some(prev) => bounds.clamp_step(prev.score, proposed),
            None => bounds.clamp_range(proposed),
        };
        let entry = RelationshipEntry {
            subject: self.character.clone(),
            object: object.clone(),
            score,
            judgement: judgement.into(),
        };
        self.relationships.insert(object.clone(), entry.clone());
        self.relationship_updated.insert(object.clone(), round);
        Ok(entry)
    }

    /// Fills neutral entries for characters that have none yet.
    pub fn ensure_relationships<'a, I>(&mut self, others: I)
    where
        I: IntoIterator<Item = &'a CharacterId>,
    {
        for other in others {
            if other == &self.character || self.relationships.contains_key(other) {
                continue;
            }
            self.relationships.insert(
                other.clone(),
                RelationshipEntry {
                    subject: self.character.clone(),
                    object: other.clone(),
                    score: 0,
                    judgement: String::new(),
                },
            );
        }
    }

    pub fn append_memory(&mut self, action: ActionKind, round: u32, stage: StageId, text: impl Into<String>) {
        self.slots
            .entry(action)
            .or_insert_with(|| MemorySlot::new(action))
            .push(MemoryItem {
                round,
                stage,
                text: text.into(),
            });
    }

    /// Assembles what `action` may read: scratch, beliefs, relationship rows
    /// for characters in the transcript or `focus`, the single upstream slot,
    /// and the transcript. With `memory_enabled` false the slot is omitted.
    pub fn context_for(
        &self,
        action: ActionKind,
        stage: StageId,
        transcript: &[TranscriptLine],
        focus: &BTreeSet<CharacterId>,
        memory_enabled: bool,
    ) -> ContextBundle {
        let mut present: BTreeSet<&CharacterId> = transcript.iter().map(|l| &l.speaker).collect();
        present.extend(focus.iter());
        let relationships = self
            .relationships
            .values()
            .filter(|r| present.contains(&r.object))
            .cloned()
            .collect();
        let memory_source = self.flow.upstream(action, stage);
        let memory = match (memory_enabled, memory_source) {
            (true, Some(src)) => self
                .slots
                .get(&src)
                .map(|s| s.items().to_vec())
                .unwrap_or_default(),
            _ => Vec::new(),
        };
        ContextBundle {
            scratch: self.scratch.clone(),
            beliefs: self.beliefs.clone(),
            relationships,
            memory_source,
            memory,
            transcript: transcript.to_vec(),
        }
    }

    pub fn snapshot(&self, round: u32) -> PersonaSnapshot {
        PersonaSnapshot {
            round,
            character: self.character.clone(),
            scratch_hash: self.scratch.digest(),
            beliefs: self.beliefs.iter().map(|b| b.score).collect(),
            relationships: self
                .relationships
                .iter()
                .map(|(k, v)| (k.clone(), v.score))
                .collect(),
            memory_lengths: self.slots.iter().map(|(k, s)| (*k, s.len())).collect(),
        }
    }

    /// Content hash of the whole persona, for read-only checks.
    pub fn state_digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("persona serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn persona() -> PersonaState {
        PersonaState::new(
            "kendall".into(),
            Scratch::new("rebellious heir", "inherit the company"),
            &[BeliefSpec {
                statement: "I should run the company".into(),
                score: 5,
            }],
            MemoryFlowGraph::default(),
            PersonaBounds::default(),
        )
    }

    #[test]
    fn belief_update_is_step_and_range_clamped() {
        let mut p = persona();
        assert_eq!(p.apply_belief_update(0, 9, 1).unwrap(), 7);
        assert_eq!(p.apply_belief_update(0, 7, 2).unwrap(), 7);
        assert!(matches!(
            p.apply_belief_update(0, 3, 2),
            Err(PersonaError::BeliefAlreadyUpdated { .. })
        ));
        assert_eq!(p.apply_belief_update(0, 100, 3).unwrap(), 9);
        assert_eq!(p.apply_belief_update(0, 11, 4).unwrap(), 10);
        assert_eq!(p.apply_belief_update(0, 11, 5).unwrap(), 10);
        assert!(matches!(p.apply_belief_update(3, 1, 6), Err(PersonaError::UnknownBelief(3))));
    }

    #[test]
    fn relationship_initial_prediction_is_unclamped_then_bounded() {
        let mut p = persona();
        let shiv: CharacterId = "shiv".into();
        assert_eq!(p.apply_relationship_update(&shiv, -3, "rival", 1).unwrap().score, -3);
        assert_eq!(p.apply_relationship_update(&shiv, -9, "enemy", 2).unwrap().score, -6);
        let same = p.apply_relationship_update(&shiv, -6, "still enemy", 3).unwrap();
        assert_eq!(same.score, -6);
        assert_eq!(same.judgement, "still enemy");
        let logan: CharacterId = "logan".into();
        assert_eq!(p.apply_relationship_update(&logan, 8, "father", 1).unwrap().score, 8);
        assert_eq!(
            p.apply_relationship_update(&"kendall".into(), 1, "", 1),
            Err(PersonaError::SelfRelation)
        );
    }

    #[test]
    fn memory_appends_preserve_order() {
        let mut p = persona();
        for i in 0..100 {
            p.append_memory(ActionKind::Summarize, 1, StageId::PrivateChat, format!("item {i}"));
        }
        let items = p.slot(ActionKind::Summarize).unwrap().items();
        assert_eq!(items.len(), 100);
        assert!(items.iter().enumerate().all(|(i, it)| it.text == format!("item {i}")));
    }

    #[test]
    fn reflect_reads_summaries_item_for_item() {
        let mut p = persona();
        p.append_memory(ActionKind::Summarize, 1, StageId::PrivateChat, "talked to shiv");
        p.append_memory(ActionKind::Speak, 1, StageId::PrivateChat, "hello shiv");
        let bundle = p.context_for(ActionKind::Reflect, StageId::Update, &[], &BTreeSet::new(), true);
        assert_eq!(bundle.memory_source, Some(ActionKind::Summarize));
        assert_eq!(bundle.memory, p.slot(ActionKind::Summarize).unwrap().items());
    }

    #[test]
    fn group_speak_reads_plan_slot() {
        let flow = MemoryFlowGraph::default();
        assert_eq!(flow.upstream(ActionKind::Speak, StageId::GroupChat), Some(ActionKind::Perceive));
        assert_eq!(flow.upstream(ActionKind::Speak, StageId::PrivateChat), Some(ActionKind::Choose));
        assert_eq!(flow.upstream(ActionKind::Think, StageId::PrivateChat), None);
        assert!(flow.validate().is_ok());
    }

    #[test]
    fn empty_upstream_gives_empty_memory() {
        let p = persona();
        let bundle = p.context_for(ActionKind::Speak, StageId::GroupChat, &[], &BTreeSet::new(), true);
        assert!(bundle.memory.is_empty());
        assert_eq!(bundle.scratch.objective(), "inherit the company");
    }
}
