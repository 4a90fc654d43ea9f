use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(value: &str) -> Self {
                Self(value.to_string())
            }
        }

        impl From<String> for $name {
            fn from(value: String) -> Self {
                Self(value)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

string_id!(
    /// Short stable token naming a character, e.g. `logan`.
    CharacterId
);
string_id!(CampId);
string_id!(ResourceId);

/// The five stages of a round, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Update,
    PrivateChat,
    ConfidentialMeeting,
    GroupChat,
    Settlement,
}

impl StageId {
    pub const ALL: [StageId; 5] = [
        StageId::Update,
        StageId::PrivateChat,
        StageId::ConfidentialMeeting,
        StageId::GroupChat,
        StageId::Settlement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Update => "update",
            StageId::PrivateChat => "private_chat",
            StageId::ConfidentialMeeting => "confidential_meeting",
            StageId::GroupChat => "group_chat",
            StageId::Settlement => "settlement",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Think,
    Perceive,
    Choose,
    Speak,
    Summarize,
    Reflect,
    Vote,
    CampChange,
    ResourceTransfer,
}

impl ActionKind {
    /// The seven agent actions; the remaining kinds are engine bookkeeping.
    pub const AGENT_ACTIONS: [ActionKind; 7] = [
        ActionKind::Think,
        ActionKind::Perceive,
        ActionKind::Choose,
        ActionKind::Speak,
        ActionKind::Summarize,
        ActionKind::Reflect,
        ActionKind::Vote,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Think => "think",
            ActionKind::Perceive => "perceive",
            ActionKind::Choose => "choose",
            ActionKind::Speak => "speak",
            ActionKind::Summarize => "summarize",
            ActionKind::Reflect => "reflect",
            ActionKind::Vote => "vote",
            ActionKind::CampChange => "camp_change",
            ActionKind::ResourceTransfer => "resource_transfer",
        }
    }

    pub fn is_agent_action(self) -> bool {
        Self::AGENT_ACTIONS.contains(&self)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown action kind `{s}`"))
    }
}

/// A point in logical simulation time. Ordering follows execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime {
    pub round: u32,
    pub stage: StageId,
    /// Group-chat sub-round (1-based); 0 outside the group stage.
    #[serde(default)]
    pub sub_round: u32,
}

impl SimTime {
    pub fn new(round: u32, stage: StageId) -> Self {
        Self {
            round,
            stage,
            sub_round: 0,
        }
    }

    pub fn group(round: u32, sub_round: u32) -> Self {
        Self {
            round,
            stage: StageId::GroupChat,
            sub_round,
        }
    }

    /// A time after every event of a run with `rounds` rounds.
    pub fn end_of_run(rounds: u32) -> Self {
        Self {
            round: rounds.saturating_add(1),
            stage: StageId::Update,
            sub_round: 0,
        }
    }
}
