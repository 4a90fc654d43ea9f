//! Domain vocabulary: characters, camps, resources, visibility and the run log.

mod ids;
pub mod log;
pub mod story;
pub mod visibility;

use serde::{Deserialize, Serialize};

pub use ids::{ActionKind, CampId, CharacterId, ResourceId, SimTime, StageId};
pub use log::{
    ActionRecord, ActorKind, LogError, LogLine, Payload, PersonaSnapshot, RecordStatus,
    RunHeader, RunLog, ScheduleEntry, UsageRow,
};
pub use story::{
    validate_story, BeliefSpec, Camp, CampKind, CharacterSpec, ModelError, Resource,
    StoryConfig, VictoryKind, VictoryRule, Violation, WorldState,
};
pub use visibility::{
    action_visible_to, metadata_view, pending_lag, redact_for, Visibility, VisibilityKind,
    VisibilityScope,
};

/// One line of conversation as shown to an agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    /// Sequence number of the record the line was rendered from.
    pub source: Option<u64>,
    pub speaker: CharacterId,
    pub text: String,
    /// The line is a meeting note; the content was withheld.
    #[serde(default)]
    pub metadata_only: bool,
}

impl TranscriptLine {
    pub fn from_record(record: &ActionRecord) -> Self {
        Self {
            source: Some(record.sequence_no),
            speaker: record.actor.clone(),
            text: record.payload.text.clone(),
            metadata_only: false,
        }
    }

    pub fn metadata(record: &ActionRecord) -> Self {
        Self {
            source: Some(record.sequence_no),
            speaker: record.actor.clone(),
            text: visibility::meeting_note(record),
            metadata_only: true,
        }
    }
}
