//! Per-run event feed. Every log line gets a sequence number; viewers read
//! from a cursor and see only what their character may see.

use std::sync::RwLock;

use groupchat_core::model::{redact_for, CharacterId, LogLine, SimTime, Visibility, VisibilityKind};
use groupchat_core::action_visible_to;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Viewer {
    /// Sees everything. Events are flagged so clients can say so.
    Observer,
    Character(CharacterId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedEvent {
    /// 1-based position of the line in the run log.
    pub seq: u64,
    pub observer: bool,
    pub line: LogLine,
}

impl FeedEvent {
    pub fn kind(&self) -> &'static str {
        match self.line {
            LogLine::Header(_) => "header",
            LogLine::Schedule(_) => "schedule",
            LogLine::Record(_) => "record",
            LogLine::Snapshot(_) => "snapshot",
            LogLine::Settlement(_) => "settlement",
            LogLine::Usage(_) => "usage",
        }
    }
}

/// A batch read from a cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub events: Vec<FeedEvent>,
    /// Pass back as `after` to continue without gaps or repeats.
    pub cursor: u64,
    /// Nothing further will ever be delivered to this viewer.
    pub complete: bool,
}

pub struct Feed {
    lines: RwLock<Vec<LogLine>>,
    /// Bumped on every change a reader might care about.
    version: watch::Sender<u64>,
}

impl Default for Feed {
    fn default() -> Self {
        Self { lines: RwLock::new(Vec::new()), version: watch::channel(0).0 }
    }
}

impl Feed {
    pub fn push(&self, line: LogLine) -> u64 {
        let seq = {
            let mut lines = self.lines.write().expect("feed lock");
            lines.push(line);
            lines.len() as u64
        };
        self.bump();
        seq
    }

    pub fn reset(&self) {
        self.lines.write().expect("feed lock").clear();
        self.bump();
    }

    pub fn len(&self) -> u64 {
        self.lines.read().expect("feed lock").len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bump(&self) {
        self.version.send_modify(|v| *v += 1);
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.version.subscribe()
    }

    pub fn lines(&self) -> Vec<LogLine> {
        self.lines.read().expect("feed lock").clone()
    }

    /// Events after `after` for `viewer` at time `now`. `finished` means the
    /// run will produce no more lines.
    ///
    /// A group-chat line still inside its lag window stops the batch: it
    /// becomes visible later, and delivering what follows first would
    /// reorder the feed.
    pub fn read(&self, viewer: &Viewer, after: u64, now: SimTime, lag: u32, finished: bool) -> Batch {
        let lines = self.lines.read().expect("feed lock");
        let mut events = Vec::new();
        let mut cursor = after.min(lines.len() as u64);
        for (i, line) in lines.iter().enumerate().skip(cursor as usize) {
            let seq = i as u64 + 1;
            match filter(viewer, line, now, lag) {
                Filtered::Deliver(line) => events.push(FeedEvent { seq, observer: *viewer == Viewer::Observer, line }),
                Filtered::Skip => {}
                Filtered::NotYet => break,
            }
            cursor = seq;
        }
        let complete = finished && cursor == lines.len() as u64;
        Batch { events, cursor, complete }
    }
}

#[allow(clippy::large_enum_variant)]
enum Filtered {
    Deliver(LogLine),
    Skip,
    NotYet,
}

fn filter(viewer: &Viewer, line: &LogLine, now: SimTime, lag: u32) -> Filtered {
    let me = match viewer {
        Viewer::Observer => return Filtered::Deliver(line.clone()),
        Viewer::Character(id) => id,
    };
    match line {
        // the header carries every character's private scratch
        LogLine::Header(_) | LogLine::Usage(_) => Filtered::Skip,
        // persona state is private, and humans do not see numeric scores
        LogLine::Snapshot(_) => Filtered::Skip,
        LogLine::Schedule(_) | LogLine::Settlement(_) => Filtered::Deliver(line.clone()),
        LogLine::Record(r) => match action_visible_to(r, me, now, lag) {
            Visibility::Hidden if r.visibility.kind == VisibilityKind::GroupLagged => Filtered::NotYet,
            Visibility::Hidden => Filtered::Skip,
            _ => match redact_for(r, me, now, lag) {
                Some(view) => Filtered::Deliver(LogLine::Record(view)),
                None => Filtered::Skip,
            },
        },
    }
}
