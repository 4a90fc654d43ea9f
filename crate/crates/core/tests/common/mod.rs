#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use groupchat_core::backend::ScriptedBackend;
use groupchat_core::engine::{RunOptions, RunOutcome, Simulation};
use groupchat_core::stories::load_preset;
use groupchat_core::ChatBackend;

pub fn script_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scripts").join(format!("{name}.json"))
}

pub fn scripted(name: &str) -> Arc<dyn ChatBackend> {
    Arc::new(ScriptedBackend::load(&script_path(name)).expect("script loads"))
}

pub fn run(story: &str, script: &str, rounds: u32, seed: u64) -> RunOutcome {
    let opts = RunOptions { rounds, ..RunOptions::default() };
    Simulation::new(load_preset(story).unwrap(), scripted(script), opts, seed)
        .unwrap()
        .run()
        .unwrap()
}

use std::sync::Mutex;

use groupchat_core::backend::{BackendError, ChatTag};
use groupchat_core::{ChatRequest, ChatResponse};

/// Passes requests through and remembers every tag.
pub struct Counting {
    pub inner: Arc<dyn ChatBackend>,
    pub tags: Mutex<Vec<ChatTag>>,
}

impl Counting {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Arc<Self> {
        Arc::new(Self { inner, tags: Mutex::new(Vec::new()) })
    }

    pub fn tags(&self) -> Vec<ChatTag> {
        self.tags.lock().unwrap().clone()
    }
}

impl ChatBackend for Counting {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.tags.lock().unwrap().push(request.tag.clone());
        self.inner.complete(request)
    }
}

/// `rules` answer first; the named script handles everything else.
pub fn layered(name: &str, rules: Vec<groupchat_core::backend::ScriptRule>) -> Arc<dyn ChatBackend> {
    use groupchat_core::backend::{Script, ScriptedBackend};
    let base = Script::from_json(&std::fs::read_to_string(script_path(name)).unwrap()).unwrap();
    let mut script = Script { rules, ..Script::default() };
    script.rules.extend(base.rules);
    script.fallback = base.fallback;
    Arc::new(ScriptedBackend::new(script).unwrap())
}

/// Entropy computed the slow way: list every bigram, count each by scanning.
pub fn brute_force_entropy(corpus: &[String]) -> f64 {
    let mut bigrams: Vec<(String, String)> = Vec::new();
    for u in corpus {
        let words: Vec<String> = u
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        for i in 1..words.len() {
            bigrams.push((words[i - 1].clone(), words[i].clone()));
        }
    }
    let n = bigrams.len() as f64;
    let mut seen: Vec<&(String, String)> = Vec::new();
    let mut h = 0.0;
    for b in &bigrams {
        if seen.contains(&b) {
            continue;
        }
        seen.push(b);
        let c = bigrams.iter().filter(|x| *x == b).count() as f64;
        h += (c / n) * (n / c).log2();
    }
    h
}

/// Answers echo probes by counting what it was given.
pub struct Counter;

impl ChatBackend for Counter {
    fn id(&self) -> &str {
        "counter"
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let user = &req.messages.last().unwrap().content;
        let n = if user.contains("Conversation:") {
            user.lines().filter(|l| l.contains("): ")).count() / 2
        } else {
            user.lines().filter(|l| l.starts_with("[round ")).count()
        };
        Ok(ChatResponse { content: format!("ANSWER: {n}"), usage: groupchat_core::backend::Usage::default(), latency_ms: 0 })
    }
}

