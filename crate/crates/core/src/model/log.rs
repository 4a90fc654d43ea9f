use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::ids::{ActionKind, CharacterId, StageId};
use super::story::StoryConfig;
use super::visibility::VisibilityScope;
use crate::engine::settle::SettlementResult;
use crate::engine::RunOptions;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    #[default]
    Model,
    Human,
    Engine,
}

impl ActorKind {
    fn is_model(&self) -> bool {
        *self == ActorKind::Model
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    #[default]
    Ok,
    /// Turn skipped after exhausted retries or a human timeout.
    Skipped,
    /// Explicit group-chat pass.
    Pass,
    /// A proposal the engine refused (e.g. a locked character switching camps).
    Rejected,
    /// Fallback content stored after a failed action.
    Degraded,
    /// The action produced nothing usable; previous state kept.
    Failed,
    Abstain,
}

impl RecordStatus {
    fn is_ok(&self) -> bool {
        *self == RecordStatus::Ok
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "RecordStatus::is_ok")]
    pub status: RecordStatus,
}

impl Payload {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Default::default()
        }
    }

    pub fn with_field(mut self, key: &str, value: impl Into<String>) -> Self {
        self.fields.insert(key.to_string(), value.into());
        self
    }

    pub fn with_status(mut self, status: RecordStatus) -> Self {
        self.status = status;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub sequence_no: u64,
    pub round: u32,
    pub stage: StageId,
    pub actor: CharacterId,
    #[serde(default, skip_serializing_if = "ActorKind::is_model")]
    pub actor_kind: ActorKind,
    pub action_kind: ActionKind,
    pub payload: Payload,
    pub visibility: VisibilityScope,
}

/// Numeric persona state of one character at the end of a round's update stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSnapshot {
    pub round: u32,
    pub character: CharacterId,
    pub scratch_hash: String,
    pub beliefs: Vec<i32>,
    pub relationships: BTreeMap<CharacterId, i32>,
    pub memory_lengths: BTreeMap<ActionKind, usize>,
}

/// Turn order for one stage, with the tie groups the seeded draw shuffled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub round: u32,
    pub stage: StageId,
    pub order: Vec<CharacterId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tie_groups: Vec<Vec<CharacterId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRow {
    pub actor: CharacterId,
    pub action_kind: ActionKind,
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub story_id: String,
    pub seed: u64,
    pub story: StoryConfig,
    pub options: RunOptions,
}

/// One line of the JSONL log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)] // one header per log
pub enum LogLine {
    Header(RunHeader),
    Schedule(ScheduleEntry),
    Record(ActionRecord),
    Snapshot(PersonaSnapshot),
    Settlement(SettlementResult),
    Usage(UsageRow),
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("log line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("log has no header line")]
    MissingHeader,
    #[error("record sequence_no {found} does not follow {previous}")]
    Sequence { previous: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Append-only run log. Records are never edited once appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub header: RunHeader,
    records: Vec<ActionRecord>,
    pub persona_snapshots: Vec<PersonaSnapshot>,
    pub schedules: Vec<ScheduleEntry>,
    pub settlement: Option<SettlementResult>,
    pub usage: Vec<UsageRow>,
}

impl RunLog {
    pub fn new(header: RunHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
            persona_snapshots: Vec::new(),
            schedules: Vec::new(),
            settlement: None,
            usage: Vec::new(),
        }
    }

    pub fn story_id(&self) -> &str {
        &self.header.story_id
    }

    pub fn seed(&self) -> u64 {
        self.header.seed
    }

    pub fn records(&self) -> &[ActionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn next_sequence_no(&self) -> u64 {
        self.records.last().map_or(1, |r| r.sequence_no + 1)
    }

    /// Appends a record, assigning the next sequence number. Returns it.
    pub fn append(&mut self, mut record: ActionRecord) -> u64 {
        record.sequence_no = self.next_sequence_no();
        let seq = record.sequence_no;
        self.records.push(record);
        seq
    }

    pub fn record(&self, sequence_no: u64) -> Option<&ActionRecord> {
        // sequence numbers are dense and start at 1
        let idx = usize::try_from(sequence_no.checked_sub(1)?).ok()?;
        self.records.get(idx).filter(|r| r.sequence_no == sequence_no)
    }

    /// Payloads of every successful speak record, in log order.
    pub fn utterances(&self) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.action_kind == ActionKind::Speak && r.payload.status == RecordStatus::Ok)
            .map(|r| r.payload.text.as_str())
            .collect()
    }

    pub fn snapshots_for<'a>(
        &'a self,
        character: &'a CharacterId,
    ) -> impl Iterator<Item = &'a PersonaSnapshot> + 'a {
        self.persona_snapshots
            .iter()
            .filter(move |s| &s.character == character)
    }

    pub fn lines(&self) -> Vec<LogLine> {
        let mut lines = Vec::with_capacity(self.records.len() + self.persona_snapshots.len() + 8);
        lines.push(LogLine::Header(self.header.clone()));
        lines.extend(self.schedules.iter().cloned().map(LogLine::Schedule));
        lines.extend(self.records.iter().cloned().map(LogLine::Record));
        lines.extend(self.persona_snapshots.iter().cloned().map(LogLine::Snapshot));
        if let Some(s) = &self.settlement {
            lines.push(LogLine::Settlement(s.clone()));
        }
        lines.extend(self.usage.iter().cloned().map(LogLine::Usage));
        lines
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in self.lines() {
            out.push_str(&serde_json::to_string(&line).expect("log lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        Self::read_jsonl(text.as_bytes())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, LogError> {
        let mut log: Option<RunLog> = None;
        let mut pending = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line)
                .map_err(|source| LogError::Parse { line: idx + 1, source })?;
            match parsed {
                LogLine::Header(h) => log = Some(RunLog::new(h)),
                other => pending.push(other),
            }
        }
        let mut log = log.ok_or(LogError::MissingHeader)?;
        for line in pending {
            match line {
                LogLine::Header(_) => {}
                LogLine::Schedule(s) => log.schedules.push(s),
                LogLine::Record(r) => {
                    let expected = log.next_sequence_no();
                    if r.sequence_no != expected {
                        return Err(LogError::Sequence {
                            previous: expected - 1,
                            found: r.sequence_no,
                        });
                    }
                    log.records.push(r);
                }
                LogLine::Snapshot(s) => log.persona_snapshots.push(s),
                LogLine::Settlement(s) => log.settlement = Some(s),
                LogLine::Usage(u) => log.usage.push(u),
            }
        }
        Ok(log)
    }
}
