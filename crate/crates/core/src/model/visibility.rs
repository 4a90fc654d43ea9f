use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ids::{CharacterId, SimTime, StageId};
use super::log::{ActionRecord, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityKind {
    /// Only the participants ever see the record (private chats, inner actions).
    ParticipantsOnly,
    /// Everyone learns who met whom; only participants see the content.
    MetadataPublic,
    /// Group-chat content, hidden from others until the lag expires.
    GroupLagged,
    Public,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityScope {
    pub kind: VisibilityKind,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub participants: BTreeSet<CharacterId>,
    /// Group sub-round the record was posted in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_posted: Option<u32>,
}

impl VisibilityScope {
    pub fn participants_only<I: IntoIterator<Item = CharacterId>>(ids: I) -> Self {
        Self {
            kind: VisibilityKind::ParticipantsOnly,
            participants: ids.into_iter().collect(),
            round_posted: None,
        }
    }

    pub fn metadata_public<I: IntoIterator<Item = CharacterId>>(ids: I) -> Self {
        Self {
            kind: VisibilityKind::MetadataPublic,
            participants: ids.into_iter().collect(),
            round_posted: None,
        }
    }

    pub fn group_lagged(speaker: CharacterId, sub_round: u32) -> Self {
        Self {
            kind: VisibilityKind::GroupLagged,
            participants: BTreeSet::from([speaker]),
            round_posted: Some(sub_round),
        }
    }

    pub fn public() -> Self {
        Self {
            kind: VisibilityKind::Public,
            participants: BTreeSet::new(),
            round_posted: None,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            VisibilityKind::ParticipantsOnly | VisibilityKind::MetadataPublic => {
                !self.participants.is_empty()
            }
            VisibilityKind::GroupLagged => self.round_posted.is_some(),
            VisibilityKind::Public => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Full,
    MetadataOnly,
    Hidden,
}

/// Decides what `viewer` may see of `record` at time `now`.
///
/// Participants always see the full record. Group-chat content posted in
/// sub-round `r` becomes visible to everyone else from sub-round `r + group_lag`
/// of the same group stage, and at any later stage or round.
pub fn action_visible_to(
    record: &ActionRecord,
    viewer: &CharacterId,
    now: SimTime,
    group_lag: u32,
) -> Visibility {
    let scope = &record.visibility;
    if scope.participants.contains(viewer) {
        return Visibility::Full;
    }
    match scope.kind {
        VisibilityKind::ParticipantsOnly => Visibility::Hidden,
        VisibilityKind::MetadataPublic => Visibility::MetadataOnly,
        VisibilityKind::Public => Visibility::Full,
        VisibilityKind::GroupLagged => {
            let posted = scope.round_posted.unwrap_or(0);
            let later_slice = now.round > record.round
                || (now.round == record.round && now.stage > record.stage);
            let same_stage = now.round == record.round && now.stage == record.stage;
            if later_slice || (same_stage && now.sub_round >= posted.saturating_add(group_lag)) {
                Visibility::Full
            } else {
                Visibility::Hidden
            }
        }
    }
}

/// True when `record` is hidden now but will become visible to `viewer` later.
pub fn pending_lag(record: &ActionRecord, viewer: &CharacterId, now: SimTime, group_lag: u32) -> bool {
    record.visibility.kind == VisibilityKind::GroupLagged
        && action_visible_to(record, viewer, now, group_lag) == Visibility::Hidden
}

/// The record as `viewer` may see it, or `None` when hidden.
pub fn redact_for(
    record: &ActionRecord,
    viewer: &CharacterId,
    now: SimTime,
    group_lag: u32,
) -> Option<ActionRecord> {
    match action_visible_to(record, viewer, now, group_lag) {
        Visibility::Full => Some(record.clone()),
        Visibility::MetadataOnly => Some(metadata_view(record)),
        Visibility::Hidden => None,
    }
}

/// Actor, participants and stage only; the content is replaced by a meeting note.
pub fn metadata_view(record: &ActionRecord) -> ActionRecord {
    let mut view = record.clone();
    view.payload = Payload::text(meeting_note(record));
    view
}

pub fn meeting_note(record: &ActionRecord) -> String {
    let others: Vec<&str> = record
        .visibility
        .participants
        .iter()
        .filter(|id| **id != record.actor)
        .map(CharacterId::as_str)
        .collect();
    if others.is_empty() {
        format!("({} acted during {})", record.actor, stage_label(record.stage))
    } else {
        format!("({} met {})", record.actor, others.join(", "))
    }
}

fn stage_label(stage: StageId) -> &'static str {
    stage.as_str()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ids::ActionKind;

    fn record(scope: VisibilityScope, round: u32, stage: StageId) -> ActionRecord {
        ActionRecord {
            sequence_no: 1,
            round,
            stage,
            actor: "kendall".into(),
            actor_kind: Default::default(),
            action_kind: ActionKind::Speak,
            payload: Payload::text("hello"),
            visibility: scope,
        }
    }

    #[test]
    fn private_chat_hidden_from_third_party() {
        let r = record(
            VisibilityScope::participants_only(["kendall".into(), "shiv".into()]),
            1,
            StageId::PrivateChat,
        );
        let now = SimTime::new(3, StageId::Settlement);
        assert_eq!(action_visible_to(&r, &"roman".into(), now, 1), Visibility::Hidden);
        assert_eq!(action_visible_to(&r, &"shiv".into(), now, 1), Visibility::Full);
    }

    #[test]
    fn confidential_meeting_exposes_metadata_only() {
        let r = record(
            VisibilityScope::metadata_public(["kendall".into(), "hugo".into()]),
            1,
            StageId::ConfidentialMeeting,
        );
        let now = SimTime::new(1, StageId::GroupChat);
        assert_eq!(
            action_visible_to(&r, &"logan".into(), now, 1),
            Visibility::MetadataOnly
        );
        let view = redact_for(&r, &"logan".into(), now, 1).unwrap();
        assert_eq!(view.payload.text, "(kendall met hugo)");
        assert!(view.payload.fields.is_empty());
    }

    #[test]
    fn group_lag_of_one_sub_round() {
        let r = record(VisibilityScope::group_lagged("kendall".into(), 2), 1, StageId::GroupChat);
        let other: CharacterId = "shiv".into();
        assert_eq!(action_visible_to(&r, &other, SimTime::group(1, 2), 1), Visibility::Hidden);
        assert_eq!(action_visible_to(&r, &other, SimTime::group(1, 3), 1), Visibility::Full);
        assert_eq!(action_visible_to(&r, &other, SimTime::new(2, StageId::Update), 1), Visibility::Full);
        // two-sub-round reading
        assert_eq!(action_visible_to(&r, &other, SimTime::group(1, 3), 2), Visibility::Hidden);
        assert!(pending_lag(&r, &other, SimTime::group(1, 2), 1));
    }
}
