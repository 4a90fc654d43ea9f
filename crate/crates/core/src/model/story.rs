use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ids::{CampId, CharacterId, ResourceId};
use crate::persona::MemoryFlowGraph;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefSpec {
    pub statement: String,
    pub score: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub id: CharacterId,
    pub name: String,
    /// Personality and background.
    pub scratch: String,
    #[serde(default)]
    pub objective: String,
    pub is_principal: bool,
    pub initial_camp: CampId,
    #[serde(default)]
    pub camp_locked: bool,
    #[serde(default)]
    pub initial_beliefs: Vec<BeliefSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resource {
    pub id: ResourceId,
    #[serde(default)]
    pub owner: Option<CharacterId>,
    #[serde(default)]
    pub impact: u32,
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampKind {
    Defense,
    Offense,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Camp {
    pub id: CampId,
    pub kind: CampKind,
    pub members: BTreeSet<CharacterId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictoryKind {
    /// The defense PC may cede to an offense PC; otherwise a forced pick.
    Concession,
    /// A judge rules for one side.
    Verdict,
    /// No predicate; the vote tally alone names a winner.
    OpenVote,
    /// Like concession, over lead roles.
    Casting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VictoryRule {
    pub kind: VictoryKind,
    /// Who settles the predicate: the defense PC, or the judge for verdicts.
    #[serde(default)]
    pub decider: Option<CharacterId>,
    #[serde(default)]
    pub defendant: Option<CharacterId>,
    /// Characters the decider may name.
    #[serde(default)]
    pub eligible: Vec<CharacterId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryConfig {
    pub id: String,
    pub title: String,
    /// Background, rules and goals shown to every character.
    pub progress_description: String,
    pub characters: Vec<CharacterSpec>,
    #[serde(default)]
    pub resources: Vec<Resource>,
    pub camps: Vec<Camp>,
    pub victory: VictoryRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<MemoryFlowGraph>,
    /// Paths of fields invented for a preset rather than taken from a source.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub authored: Vec<String>,
}

impl StoryConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("story serializes")
    }

    pub fn character(&self, id: &CharacterId) -> Option<&CharacterSpec> {
        self.characters.iter().find(|c| &c.id == id)
    }
}

/// One broken invariant, with a path to the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown character `{0}`")]
    UnknownCharacter(CharacterId),
    #[error("unknown camp `{0}`")]
    UnknownCamp(CampId),
    #[error("character `{0}` is locked to its camp")]
    CampLocked(CharacterId),
    #[error("character `{0}` is already in camp `{1}`")]
    SameCamp(CharacterId, CampId),
}

/// Mutable world state: who is in which camp, and who owns what.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub round: u32,
    pub characters: BTreeMap<CharacterId, CharacterSpec>,
    pub camps: BTreeMap<CampId, Camp>,
    camp_of: BTreeMap<CharacterId, CampId>,
    pub resources: BTreeMap<ResourceId, Resource>,
}

impl WorldState {
    pub fn camp_of(&self, character: &CharacterId) -> Result<&Camp, ModelError> {
        let camp_id = self
            .camp_of
            .get(character)
            .ok_or_else(|| ModelError::UnknownCharacter(character.clone()))?;
        Ok(&self.camps[camp_id])
    }

    pub fn character(&self, id: &CharacterId) -> Result<&CharacterSpec, ModelError> {
        self.characters
            .get(id)
            .ok_or_else(|| ModelError::UnknownCharacter(id.clone()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &CharacterId> {
        self.characters.keys()
    }

    pub fn principals(&self) -> impl Iterator<Item = &CharacterId> {
        self.characters
            .values()
            .filter(|c| c.is_principal)
            .map(|c| &c.id)
    }

    pub fn is_principal(&self, id: &CharacterId) -> bool {
        self.characters.get(id).is_some_and(|c| c.is_principal)
    }

    /// Sum of resource impact owned by members of `camp`.
    pub fn camp_influence(&self, camp: &CampId) -> u32 {
        let Some(camp) = self.camps.get(camp) else {
            return 0;
        };
        self.resources
            .values()
            .filter(|r| r.owner.as_ref().is_some_and(|o| camp.members.contains(o)))
            .map(|r| r.impact)
            .sum()
    }

    /// Influence of a character: the resource impact owned by its current camp.
    pub fn compute_influence(&self, character: &CharacterId) -> Result<u32, ModelError> {
        let camp = self.camp_of(character)?;
        Ok(self.camp_influence(&camp.id))
    }

    /// Moves `character` into `target`. Callers record the change.
    pub fn move_to_camp(&mut self, character: &CharacterId, target: &CampId) -> Result<CampId, ModelError> {
        let spec = self.character(character)?;
        if spec.camp_locked {
            return Err(ModelError::CampLocked(character.clone()));
        }
        if !self.camps.contains_key(target) {
            return Err(ModelError::UnknownCamp(target.clone()));
        }
        let from = self.camp_of[character].clone();
        if &from == target {
            return Err(ModelError::SameCamp(character.clone(), from));
        }
        self.camps.get_mut(&from).expect("camp exists").members.remove(character);
        self.camps
            .get_mut(target)
            .expect("camp exists")
            .members
            .insert(character.clone());
        self.camp_of.insert(character.clone(), target.clone());
        Ok(from)
    }
}

/// Checks every story invariant and builds the initial world state.
pub fn validate_story(config: &StoryConfig) -> Result<WorldState, Vec<Violation>> {
    let mut violations = Vec::new();
    let mut push = |path: String, message: String| violations.push(Violation { path, message });

    if config.id.trim().is_empty() {
        push("id".into(), "story id is empty".into());
    }

    let mut characters = BTreeMap::new();
    for (i, c) in config.characters.iter().enumerate() {
        if c.id.as_str().trim().is_empty() {
            push(format!("characters[{i}].id"), "empty character id".into());
        }
        if characters.insert(c.id.clone(), c.clone()).is_some() {
            push(format!("characters[{i}].id"), format!("duplicate character id `{}`", c.id));
        }
    }
    if !config.characters.iter().any(|c| c.is_principal) {
        push("characters".into(), "story has zero principal characters".into());
    }

    let mut camps: BTreeMap<CampId, Camp> = BTreeMap::new();
    for (i, camp) in config.camps.iter().enumerate() {
        if camps.insert(camp.id.clone(), camp.clone()).is_some() {
            push(format!("camps[{i}].id"), format!("duplicate camp id `{}`", camp.id));
        }
        for member in &camp.members {
            if !characters.contains_key(member) {
                push(
                    format!("camps[{i}].members"),
                    format!("camp `{}` lists unknown character `{member}`", camp.id),
                );
            }
        }
    }

    let mut camp_of = BTreeMap::new();
    for (i, c) in config.characters.iter().enumerate() {
        let holding: Vec<&CampId> = config
            .camps
            .iter()
            .filter(|camp| camp.members.contains(&c.id))
            .map(|camp| &camp.id)
            .collect();
        if !camps.contains_key(&c.initial_camp) {
            push(
                format!("characters[{i}].initial_camp"),
                format!("unknown camp `{}`", c.initial_camp),
            );
        }
        match holding.as_slice() {
            [] => push(
                format!("characters[{i}]"),
                format!("character `{}` belongs to no camp", c.id),
            ),
            [only] => {
                if **only != c.initial_camp {
                    push(
                        format!("characters[{i}].initial_camp"),
                        format!(
                            "character `{}` declares camp `{}` but is listed in `{only}`",
                            c.id, c.initial_camp
                        ),
                    );
                }
                camp_of.insert(c.id.clone(), (*only).clone());
            }
            many => push(
                format!("characters[{i}]"),
                format!(
                    "character `{}` belongs to {} camps: {}",
                    c.id,
                    many.len(),
                    many.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", ")
                ),
            ),
        }
    }

    for (i, camp) in config.camps.iter().enumerate() {
        let label = match camp.kind {
            CampKind::Defense => "defense",
            CampKind::Offense => "offense",
            CampKind::Neutral => continue,
        };
        let pcs = camp
            .members
            .iter()
            .filter(|m| characters.get(*m).is_some_and(|c: &CharacterSpec| c.is_principal))
            .count();
        if pcs != 1 {
            push(format!("camps[{i}]"), format!("{label} camp PC count = {pcs}"));
        }
    }

    let mut resources = BTreeMap::new();
    for (i, r) in config.resources.iter().enumerate() {
        if resources.insert(r.id.clone(), r.clone()).is_some() {
            push(format!("resources[{i}].id"), format!("duplicate resource id `{}`", r.id));
        }
        if let Some(owner) = &r.owner {
            if !characters.contains_key(owner) {
                push(
                    format!("resources[{i}].owner"),
                    format!("resource `{}` names unknown owner `{owner}`", r.id),
                );
            }
        }
    }

    let rule = &config.victory;
    let refs = rule
        .decider
        .iter()
        .map(|d| ("victory.decider", d))
        .chain(rule.defendant.iter().map(|d| ("victory.defendant", d)))
        .chain(rule.eligible.iter().map(|e| ("victory.eligible", e)));
    for (path, id) in refs {
        if !characters.contains_key(id) {
            push(path.into(), format!("unknown character `{id}`"));
        }
    }
    match rule.kind {
        VictoryKind::Concession
        | VictoryKind::Casting
        | VictoryKind::Verdict => {
            if rule.decider.is_none() {
                push("victory.decider".into(), "rule requires a decider".into());
            }
            if rule.eligible.is_empty() {
                push("victory.eligible".into(), "rule requires eligible characters".into());
            }
        }
        VictoryKind::OpenVote => {}
    }

    if let Some(flow) = &config.flow {
        if let Err(problems) = flow.validate() {
            for p in problems {
                push("flow".into(), p);
            }
        }
    }

    if !violations.is_empty() {
        return Err(violations);
    }
    Ok(WorldState {
        round: 1,
        characters,
        camps,
        camp_of,
        resources,
    })
}
