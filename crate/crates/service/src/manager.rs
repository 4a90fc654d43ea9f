//! Run lifecycle: creation, stepping on a worker thread, persistence,
//! crash recovery and the human session protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use groupchat_core::actions::Roster;
use groupchat_core::engine::human::{validate_human, HumanPayload};
use groupchat_core::engine::settle::SettlementResult;
use groupchat_core::engine::{EngineError, RunSink};
use groupchat_core::model::{validate_story, CharacterId, LogLine, SimTime, StageId};
use groupchat_core::stories::{load_story, StoryError};
use groupchat_core::{BackendDescriptor, RunOptions, Simulation, StoryConfig};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::feed::{Batch, Feed, Viewer};
use crate::manifest::{RunHandle, RunManifest, RunStatus, CACHE, JOURNAL, LOG, MANIFEST, STORY};
use crate::session::{HumanSession, Journal, PendingView, WaitHook};

/// A preset name or path, or an inline story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StorySource {
    Named(String),
    Inline(Box<StoryConfig>),
}

/// A shorthand such as `scripted:demo`, or a full descriptor object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendSpec {
    Shorthand(String),
    Descriptor(BackendDescriptor),
}

impl BackendSpec {
    pub fn resolve(&self) -> Result<BackendDescriptor, ServiceError> {
        match self {
            BackendSpec::Shorthand(s) => s.parse().map_err(ServiceError::BadRequest),
            BackendSpec::Descriptor(d) => Ok(d.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRun {
    pub story: StorySource,
    pub backend: BackendSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub options: RunOptions,
    /// Characters to hand to humans.
    #[serde(default)]
    pub humans: Vec<CharacterId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedRun {
    pub run: RunHandle,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceRequest {
    /// Engine steps to run: each round is one, settlement is the last.
    /// Absent means run to the end.
    #[serde(default)]
    pub steps: Option<u32>,
    /// Reply only once the steps are done.
    #[serde(default)]
    pub wait: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub token: String,
    pub pending_id: u64,
    #[serde(flatten)]
    pub payload: HumanPayload,
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug)]
struct Live {
    now: SimTime,
    advancing: bool,
    awaiting: BTreeSet<CharacterId>,
    settlement: Option<SettlementResult>,
}

/// State the engine thread writes into through the sink and the sessions.
struct Shared {
    feed: Feed,
    live: Mutex<Live>,
    log_file: Mutex<Option<File>>,
}

impl Shared {
    fn write_line(&self, line: &LogLine) {
        let mut guard = self.log_file.lock().expect("log lock");
        if let Some(f) = guard.as_mut() {
            let mut text = serde_json::to_string(line).expect("log lines serialize");
            text.push('\n');
            if let Err(e) = f.write_all(text.as_bytes()) {
                tracing::error!(error = %e, "could not append to the run log");
            }
        }
    }
}

struct Sink(Arc<Shared>);

impl RunSink for Sink {
    fn on_line(&self, line: &LogLine) {
        self.0.write_line(line);
        if let LogLine::Settlement(s) = line {
            self.0.live.lock().expect("live lock").settlement = Some(s.clone());
        }
        self.0.feed.push(line.clone());
    }

    fn on_time(&self, now: SimTime) {
        self.0.live.lock().expect("live lock").now = now;
        self.0.feed.bump();
    }
}

pub struct RunEntry {
    pub id: String,
    dir: PathBuf,
    story: StoryConfig,
    roster: Roster,
    shared: Arc<Shared>,
    manifest: Mutex<RunManifest>,
    sim: Mutex<Option<Simulation>>,
    sessions: BTreeMap<String, Arc<HumanSession>>,
}

impl RunEntry {
    /// Builds the in-memory run from its directory. Unfinished runs are
    /// re-executed for the steps already taken: backend replies come from
    /// the run's cache and human answers from its journal, so the rebuilt
    /// state matches the one before the restart.
    fn load(dir: &Path, manifest: RunManifest, story: StoryConfig) -> Result<Arc<Self>, ServiceError> {
        let shared = Arc::new(Shared {
            feed: Feed::default(),
            live: Mutex::new(Live {
                now: SimTime::new(1, StageId::Update),
                advancing: false,
                awaiting: BTreeSet::new(),
                settlement: None,
            }),
            log_file: Mutex::new(None),
        });
        let journal = Arc::new(Journal::open(&dir.join(JOURNAL))?);
        let hook: WaitHook = {
            let shared = Arc::clone(&shared);
            Arc::new(move |c: &CharacterId, waiting: bool| {
                let mut live = shared.live.lock().expect("live lock");
                if waiting {
                    live.awaiting.insert(c.clone());
                } else {
                    live.awaiting.remove(c);
                }
                drop(live);
                shared.feed.bump();
            })
        };
        let sessions: BTreeMap<String, Arc<HumanSession>> = manifest
            .humans
            .iter()
            .map(|(c, token)| {
                let s = HumanSession::new(token.clone(), c.clone(), Arc::clone(&journal), Arc::clone(&hook));
                (token.clone(), Arc::new(s))
            })
            .collect();

        let entry = Arc::new(Self {
            id: manifest.id.clone(),
            dir: dir.to_path_buf(),
            roster: Roster::from_story(&story),
            story,
            shared,
            manifest: Mutex::new(manifest),
            sim: Mutex::new(None),
            sessions,
        });
        let status = entry.manifest().status;
        if status.is_terminal() {
            entry.load_finished()?;
        } else {
            entry.rebuild()?;
        }
        Ok(entry)
    }

    fn load_finished(&self) -> Result<(), ServiceError> {
        let text = std::fs::read_to_string(self.dir.join(LOG))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parsed: LogLine = serde_json::from_str(line)
                .map_err(|e| ServiceError::Internal(format!("{}: {e}", self.dir.join(LOG).display())))?;
            if let LogLine::Settlement(s) = &parsed {
                self.shared.live.lock().expect("live lock").settlement = Some(s.clone());
            }
            self.shared.feed.push(parsed);
        }
        self.shared.live.lock().expect("live lock").now = SimTime::end_of_run(self.manifest().options.rounds);
        Ok(())
    }

    fn rebuild(self: &Arc<Self>) -> Result<(), ServiceError> {
        let m = self.manifest();
        let previous = std::fs::read_to_string(self.dir.join(LOG)).unwrap_or_default();
        let backend = m
            .backend
            .clone()
            .recording_into(self.dir.join(CACHE))
            .build()
            .map_err(|e| ServiceError::BadRequest(format!("backend: {e}")))?;
        let mut sim = Simulation::new(self.story.clone(), backend, m.options.clone(), m.seed).map_err(engine_error)?;
        for (c, token) in &m.humans {
            sim.bind_human(c, self.sessions[token].clone()).map_err(engine_error)?;
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(self.dir.join(LOG))?;
        *self.shared.log_file.lock().expect("log lock") = Some(file);
        self.shared.feed.reset();
        for line in sim.log().lines() {
            self.shared.write_line(&line);
            self.shared.feed.push(line);
        }
        sim.set_sink(Arc::new(Sink(Arc::clone(&self.shared))));

        let mut failure = None;
        for _ in 0..m.steps_done {
            if let Err(e) = sim.step() {
                failure = Some(e.to_string());
                break;
            }
        }
        if m.steps_done > 0 {
            let rebuilt = std::fs::read_to_string(self.dir.join(LOG)).unwrap_or_default();
            if !previous.starts_with(&rebuilt) {
                tracing::warn!(run = %self.id, "re-executed log differs from the one on disk");
            } else {
                tracing::info!(run = %self.id, steps = m.steps_done, "recovered run");
            }
        }
        self.settle_or_park(sim, failure);
        Ok(())
    }

    pub fn manifest(&self) -> RunManifest {
        self.manifest.lock().expect("manifest lock").clone()
    }

    pub fn story(&self) -> &StoryConfig {
        &self.story
    }

    fn save_manifest(&self, f: impl FnOnce(&mut RunManifest)) {
        let status = self.status();
        let mut m = self.manifest.lock().expect("manifest lock");
        if !m.status.is_terminal() {
            m.status = status;
        }
        f(&mut m);
        if let Err(e) = m.save(&self.dir) {
            tracing::error!(run = %self.id, error = %e, "could not save the manifest");
        }
    }

    pub fn status(&self) -> RunStatus {
        let m = self.manifest.lock().expect("manifest lock");
        if m.status.is_terminal() {
            return m.status;
        }
        let live = self.shared.live.lock().expect("live lock");
        if !live.awaiting.is_empty() {
            RunStatus::AwaitingHuman
        } else if m.steps_done > 0 || live.advancing {
            RunStatus::Running
        } else {
            RunStatus::Created
        }
    }

    pub fn handle(&self, with_tokens: bool) -> RunHandle {
        let status = self.status();
        let m = self.manifest();
        let live = self.shared.live.lock().expect("live lock");
        RunHandle {
            id: m.id.clone(),
            story_id: m.story_id.clone(),
            seed: m.seed,
            backend: m.backend.to_string(),
            status,
            round: live.now.round,
            stage: live.now.stage,
            sub_round: live.now.sub_round,
            rounds: m.options.rounds,
            rounds_done: m.steps_done.min(m.options.rounds),
            advancing: live.advancing,
            humans: m.humans.iter().map(|(c, t)| (c.clone(), with_tokens.then(|| t.clone()))).collect(),
            awaiting: live.awaiting.iter().cloned().collect(),
            events: self.shared.feed.len(),
            settlement: live.settlement.clone(),
            error: m.error.clone(),
        }
    }

    /// Starts a worker for up to `steps` steps and returns its handle.
    pub fn advance(self: &Arc<Self>, steps: Option<u32>) -> Result<JoinHandle<()>, ServiceError> {
        let mut slot = self.sim.lock().expect("sim lock");
        let Some(mut sim) = slot.take() else {
            let status = self.status();
            return Err(if status.is_terminal() {
                ServiceError::Conflict(format!("run is {}", status.as_str()))
            } else {
                ServiceError::Conflict("run is already advancing".into())
            });
        };
        drop(slot);
        self.shared.live.lock().expect("live lock").advancing = true;
        self.save_manifest(|_| {});
        self.shared.feed.bump();
        let entry = Arc::clone(self);
        let limit = steps.unwrap_or(u32::MAX);
        Ok(std::thread::spawn(move || {
            let mut failure = None;
            let mut taken = 0;
            while taken < limit {
                match sim.step() {
                    Ok(true) => {
                        taken += 1;
                        entry.save_manifest(|m| m.steps_done += 1);
                    }
                    Ok(false) => break,
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
                if sim.is_settled() {
                    break;
                }
            }
            entry.settle_or_park(sim, failure);
        }))
    }

    /// Finishes a settled simulation, records a failure, or puts the
    /// simulation back for the next advance.
    fn settle_or_park(&self, sim: Simulation, failure: Option<String>) {
        let rounds = self.manifest().options.rounds;
        if let Some(error) = failure {
            tracing::warn!(run = %self.id, %error, "run aborted");
            self.close_sessions();
            self.shared.live.lock().expect("live lock").advancing = false;
            self.save_manifest(|m| {
                m.status = RunStatus::Aborted;
                m.error = Some(error);
            });
        } else if sim.is_settled() {
            let outcome = sim.finish();
            self.close_sessions();
            {
                let mut live = self.shared.live.lock().expect("live lock");
                live.advancing = false;
                live.now = SimTime::end_of_run(rounds);
                live.settlement = outcome.settlement;
            }
            if let Some(f) = self.shared.log_file.lock().expect("log lock").as_mut() {
                let _ = f.sync_all();
            }
            self.save_manifest(|m| m.status = RunStatus::Finished);
        } else {
            *self.sim.lock().expect("sim lock") = Some(sim);
            self.shared.live.lock().expect("live lock").advancing = false;
            self.save_manifest(|_| {});
        }
        self.shared.feed.bump();
    }

    fn close_sessions(&self) {
        for s in self.sessions.values() {
            s.close();
        }
    }

    fn session(&self, token: &str) -> Result<&Arc<HumanSession>, ServiceError> {
        let s = self.sessions.get(token).ok_or(ServiceError::UnknownSession)?;
        let status = self.status();
        if status.is_terminal() {
            return Err(ServiceError::Expired(status.as_str()));
        }
        Ok(s)
    }

    /// The turn waiting on this session's human, if any.
    pub fn pending(&self, token: &str) -> Result<Option<PendingView>, ServiceError> {
        Ok(self.session(token)?.pending())
    }

    /// Validates a human answer the way model output is validated and
    /// hands it to the engine. On rejection the turn stays open.
    pub fn submit(&self, req: &SubmitRequest) -> Result<(), ServiceError> {
        let session = self.session(&req.token)?;
        let view = session
            .pending()
            .ok_or_else(|| ServiceError::Conflict("no action is pending for this session".into()))?;
        if view.pending.id != req.pending_id {
            return Err(ServiceError::Conflict(format!(
                "pending action {} is stale; the open one is {}",
                req.pending_id, view.pending.id
            )));
        }
        let output = validate_human(&view.pending, &req.payload, &self.roster)
            .map_err(|e| ServiceError::Validation(e.to_string()))?;
        session.answer(req.pending_id, output).map_err(ServiceError::Conflict)
    }

    pub fn viewer(&self, viewer: Option<&str>, token: Option<&str>) -> Result<Viewer, ServiceError> {
        if let Some(t) = token {
            let s = self.sessions.get(t).ok_or(ServiceError::UnknownSession)?;
            return Ok(Viewer::Character(s.character.clone()));
        }
        match viewer {
            None | Some("observer") => Ok(Viewer::Observer),
            Some(id) => {
                let id = CharacterId::from(id);
                if self.story.character(&id).is_none() {
                    return Err(ServiceError::BadRequest(format!("unknown character `{id}`")));
                }
                Ok(Viewer::Character(id))
            }
        }
    }

    /// Feed events after `after` for `viewer`, filtered at the current time.
    pub fn events(&self, viewer: &Viewer, after: u64) -> Batch {
        let status = self.status();
        let (now, advancing) = {
            let live = self.shared.live.lock().expect("live lock");
            (live.now, live.advancing)
        };
        let finished = status.is_terminal() && !advancing;
        let lag = self.manifest().options.group_lag;
        self.shared.feed.read(viewer, after, now, lag, finished)
    }

    pub fn subscribe(&self) -> tokio::sync::watch::Receiver<u64> {
        self.shared.feed.subscribe()
    }

    pub fn log_text(&self) -> Result<String, ServiceError> {
        Ok(std::fs::read_to_string(self.dir.join(LOG))?)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

fn engine_error(e: EngineError) -> ServiceError {
    match e {
        EngineError::InvalidStory(v) => ServiceError::InvalidStory(v),
        EngineError::InvalidOptions(m) => ServiceError::BadRequest(m),
        EngineError::Binding(c, why) => ServiceError::BadRequest(format!("cannot bind `{c}`: {why}")),
        other => ServiceError::Internal(other.to_string()),
    }
}

pub struct RunManager {
    data_dir: PathBuf,
    runs: RwLock<BTreeMap<String, Arc<RunEntry>>>,
}

impl RunManager {
    /// Opens a data directory, recovering every run found in it.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(&data_dir)?;
        let mut runs = BTreeMap::new();
        for (dir, manifest) in Self::scan_dirs(&data_dir)? {
            let story = match std::fs::read_to_string(dir.join(STORY))
                .map_err(StoryError::from)
                .and_then(|t| groupchat_core::stories::parse_story(&t))
            {
                Ok(s) => s,
                Err(e) => {
                    tracing::warn!(dir = %dir.display(), error = %e, "skipping run with unreadable story");
                    continue;
                }
            };
            match RunEntry::load(&dir, manifest, story) {
                Ok(entry) => {
                    runs.insert(entry.id.clone(), entry);
                }
                Err(e) => tracing::warn!(dir = %dir.display(), error = %e, "skipping run that failed to load"),
            }
        }
        Ok(Self { data_dir, runs: RwLock::new(runs) })
    }

    fn scan_dirs(data_dir: &Path) -> Result<Vec<(PathBuf, RunManifest)>, ServiceError> {
        let mut found = Vec::new();
        if !data_dir.exists() {
            return Ok(found);
        }
        for entry in std::fs::read_dir(data_dir)? {
            let dir = entry?.path();
            if !dir.join(MANIFEST).exists() {
                continue;
            }
            match RunManifest::load(&dir) {
                Ok(m) => found.push((dir, m)),
                Err(e) => tracing::warn!(dir = %dir.display(), error = %e, "unreadable manifest"),
            }
        }
        found.sort_by(|a, b| (a.1.created_unix_ms, &a.1.id).cmp(&(b.1.created_unix_ms, &b.1.id)));
        Ok(found)
    }

    /// Manifests on disk, without loading or recovering anything.
    pub fn scan(data_dir: &Path) -> Result<Vec<RunManifest>, ServiceError> {
        Ok(Self::scan_dirs(data_dir)?.into_iter().map(|(_, m)| m).collect())
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn create(&self, req: CreateRun) -> Result<CreatedRun, ServiceError> {
        let story = match req.story {
            StorySource::Named(name) => load_story(&name).map_err(|e| match e {
                StoryError::Invalid(v) => ServiceError::InvalidStory(v),
                other => ServiceError::BadRequest(other.to_string()),
            })?,
            StorySource::Inline(s) => *s,
        };
        validate_story(&story).map_err(ServiceError::InvalidStory)?;
        req.options.validate().map_err(ServiceError::BadRequest)?;
        let backend = req.backend.resolve()?;
        let mut humans = BTreeMap::new();
        for c in req.humans {
            if story.character(&c).is_none() {
                return Err(ServiceError::BadRequest(format!("cannot bind unknown character `{c}`")));
            }
            if humans.contains_key(&c) {
                return Err(ServiceError::BadRequest(format!("`{c}` is bound twice")));
            }
            humans.insert(c, uuid::Uuid::new_v4().to_string());
        }

        let suffix = uuid::Uuid::new_v4().simple().to_string();
        let id = format!("{}-{}", story.id, &suffix[..10]);
        let dir = self.data_dir.join(&id);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(
            dir.join(STORY),
            serde_json::to_vec_pretty(&story).map_err(|e| ServiceError::Internal(e.to_string()))?,
        )?;
        let manifest = RunManifest {
            id: id.clone(),
            story_id: story.id.clone(),
            seed: req.seed,
            backend,
            options: req.options,
            humans,
            status: RunStatus::Created,
            steps_done: 0,
            error: None,
            created_unix_ms: unix_ms(),
        };
        manifest.save(&dir)?;
        let entry = match RunEntry::load(&dir, manifest, story) {
            Ok(e) => e,
            Err(e) => {
                let _ = std::fs::remove_dir_all(&dir);
                return Err(e);
            }
        };
        let run = entry.handle(true);
        self.runs.write().expect("runs lock").insert(id, entry);
        Ok(CreatedRun { run })
    }

    pub fn get(&self, id: &str) -> Result<Arc<RunEntry>, ServiceError> {
        self.runs
            .read()
            .expect("runs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownRun(id.to_string()))
    }

    pub fn list(&self) -> Vec<RunHandle> {
        self.runs.read().expect("runs lock").values().map(|e| e.handle(false)).collect()
    }

    /// Releases every waiting engine thread.
    pub fn shutdown(&self) {
        for e in self.runs.read().expect("runs lock").values() {
            e.close_sessions();
        }
    }
}
