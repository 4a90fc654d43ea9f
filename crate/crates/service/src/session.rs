//! Human sessions: a mailbox the engine thread blocks on until the human
//! answers through the API or the deadline passes.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use groupchat_core::actions::StructuredOutput;
use groupchat_core::engine::human::{HumanGateway, PendingAction};
use groupchat_core::model::CharacterId;
use serde::{Deserialize, Serialize};

/// One answered (or timed-out) human turn, as written to `human.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub pending_id: u64,
    pub character: CharacterId,
    /// `None` when the turn timed out.
    pub output: Option<StructuredOutput>,
}

/// Human answers already given, so a recovered run can re-execute without
/// asking again.
pub struct Journal {
    replay: Mutex<BTreeMap<u64, Option<StructuredOutput>>>,
    file: Mutex<File>,
}

impl Journal {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut replay = BTreeMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<JournalEntry>(&line) {
                    Ok(e) => {
                        replay.insert(e.pending_id, e.output);
                    }
                    // a torn last line from a crash
                    Err(e) => tracing::warn!(error = %e, "skipping unreadable journal line"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { replay: Mutex::new(replay), file: Mutex::new(file) })
    }

    fn take(&self, pending_id: u64) -> Option<Option<StructuredOutput>> {
        self.replay.lock().expect("journal lock").remove(&pending_id)
    }

    fn append(&self, entry: &JournalEntry) {
        let mut f = self.file.lock().expect("journal lock");
        let line = serde_json::to_string(entry).expect("journal entry serializes");
        if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
            tracing::error!(error = %e, "could not write the human journal");
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingView {
    pub pending: PendingAction,
    pub deadline_unix_ms: u64,
}

#[derive(Default)]
struct Mailbox {
    pending: Option<PendingView>,
    answer: Option<StructuredOutput>,
    closed: bool,
}

/// Called with the character whenever its waiting state changes.
pub type WaitHook = Arc<dyn Fn(&CharacterId, bool) + Send + Sync>;

pub struct HumanSession {
    pub token: String,
    pub character: CharacterId,
    mailbox: Mutex<Mailbox>,
    wake: Condvar,
    journal: Arc<Journal>,
    on_wait: WaitHook,
}

impl HumanSession {
    pub fn new(token: String, character: CharacterId, journal: Arc<Journal>, on_wait: WaitHook) -> Self {
        Self { token, character, mailbox: Mutex::default(), wake: Condvar::new(), journal, on_wait }
    }

    pub fn pending(&self) -> Option<PendingView> {
        let mb = self.mailbox.lock().expect("mailbox lock");
        // an answered turn is no longer open, even before the engine wakes
        mb.pending.clone().filter(|_| mb.answer.is_none())
    }

    /// Hands a validated answer to the waiting engine. Fails if no turn is
    /// open or the client answered an older one.
    pub fn answer(&self, pending_id: u64, output: StructuredOutput) -> Result<(), String> {
        let mut mb = self.mailbox.lock().expect("mailbox lock");
        match &mb.pending {
            None => return Err("no action is pending for this session".into()),
            Some(p) if p.pending.id != pending_id => {
                return Err(format!("pending action {pending_id} is stale; the open one is {}", p.pending.id))
            }
            Some(_) if mb.answer.is_some() => return Err("this action was already answered".into()),
            Some(_) => {}
        }
        mb.answer = Some(output);
        self.wake.notify_all();
        Ok(())
    }

    /// Releases a waiting engine thread; later turns are skipped at once.
    pub fn close(&self) {
        self.mailbox.lock().expect("mailbox lock").closed = true;
        self.wake.notify_all();
    }
}

fn unix_ms(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl HumanGateway for HumanSession {
    fn await_action(&self, pending: PendingAction) -> Option<StructuredOutput> {
        if let Some(recorded) = self.journal.take(pending.id) {
            return recorded;
        }
        let timeout = Duration::from_millis(pending.timeout_ms);
        let deadline = Instant::now() + timeout;
        let id = pending.id;
        let mut mb = self.mailbox.lock().expect("mailbox lock");
        if mb.closed {
            return None;
        }
        mb.pending = Some(PendingView { pending, deadline_unix_ms: unix_ms(SystemTime::now() + timeout) });
        mb.answer = None;
        (self.on_wait)(&self.character, true);
        while mb.answer.is_none() && !mb.closed {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            mb = self.wake.wait_timeout(mb, left).expect("mailbox lock").0;
        }
        let output = mb.answer.take();
        mb.pending = None;
        drop(mb);
        self.journal.append(&JournalEntry { pending_id: id, character: self.character.clone(), output: output.clone() });
        (self.on_wait)(&self.character, false);
        output
    }
}
