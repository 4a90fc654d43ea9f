//! The on-disk description of a run and the handle clients see.

use std::collections::BTreeMap;
use std::path::Path;

use groupchat_core::engine::settle::SettlementResult;
use groupchat_core::model::{CharacterId, StageId};
use groupchat_core::{BackendDescriptor, RunOptions};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Created,
    Running,
    AwaitingHuman,
    Finished,
    Aborted,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Created => "created",
            RunStatus::Running => "running",
            RunStatus::AwaitingHuman => "awaiting_human",
            RunStatus::Finished => "finished",
            RunStatus::Aborted => "aborted",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Finished | RunStatus::Aborted)
    }
}

/// `manifest.json` in a run directory. Rewritten after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub id: String,
    pub story_id: String,
    pub seed: u64,
    /// As given by the client; the run itself records through a cache.
    pub backend: BackendDescriptor,
    pub options: RunOptions,
    /// Character -> session token.
    #[serde(default)]
    pub humans: BTreeMap<CharacterId, String>,
    pub status: RunStatus,
    /// Completed engine steps: rounds, then settlement.
    pub steps_done: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_unix_ms: u64,
}

impl RunManifest {
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    /// Written to a temporary file and renamed, so a crash never leaves a
    /// half-written manifest.
    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?)?;
        std::fs::rename(tmp, dir.join(MANIFEST))
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const STORY: &str = "story.json";
pub const LOG: &str = "log.jsonl";
pub const JOURNAL: &str = "human.jsonl";
pub const CACHE: &str = "cache";

/// What clients see of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHandle {
    pub id: String,
    pub story_id: String,
    pub seed: u64,
    pub backend: String,
    pub status: RunStatus,
    pub round: u32,
    pub stage: StageId,
    pub sub_round: u32,
    pub rounds: u32,
    pub rounds_done: u32,
    /// A worker is executing steps right now.
    pub advancing: bool,
    /// Bound characters. Tokens are only filled in when the run is created.
    pub humans: BTreeMap<CharacterId, Option<String>>,
    /// Human-bound characters whose turn is pending.
    pub awaiting: Vec<CharacterId>,
    /// Lines in the run log so far.
    pub events: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settlement: Option<SettlementResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}
