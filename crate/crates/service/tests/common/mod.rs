#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use groupchat_service::{api, RunManager};
use serde_json::Value;

pub struct Server {
    pub base: String,
    pub manager: Arc<RunManager>,
    agent: ureq::Agent,
}

impl Server {
    pub fn start(dir: &Path) -> Self {
        let manager = Arc::new(RunManager::open(dir).unwrap());
        let rt = tokio::runtime::Runtime::new().unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let addr = listener.local_addr().unwrap();
        let app = api::router(manager.clone());
        std::thread::spawn(move || rt.block_on(async { axum::serve(listener, app).await.unwrap() }));
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { base: format!("http://{addr}"), manager, agent }
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        let status = r.status().as_u16();
        (status, r.body_mut().read_json().unwrap_or(Value::Null))
    }

    pub fn get_text(&self, path: &str) -> (u16, String) {
        let mut r = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut r = self.agent.post(format!("{}{path}", self.base)).send_json(body).unwrap();
        let status = r.status().as_u16();
        (status, r.body_mut().read_json().unwrap_or(Value::Null))
    }

    /// Reads server-sent events until the stream ends or `limit` events.
    pub fn events(&self, path: &str, limit: usize) -> Vec<(String, Value)> {
        let r = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        assert_eq!(r.status().as_u16(), 200, "{path}");
        let reader = BufReader::new(r.into_body().into_reader());
        let mut out = Vec::new();
        let mut kind = String::new();
        for line in reader.lines() {
            let line = line.unwrap();
            if let Some(k) = line.strip_prefix("event:") {
                kind = k.trim().to_string();
            } else if let Some(d) = line.strip_prefix("data:") {
                out.push((kind.clone(), serde_json::from_str(d.trim()).unwrap()));
                if out.len() >= limit {
                    break;
                }
            }
        }
        out
    }

    pub fn wait_for(&self, id: &str, what: impl Fn(&Value) -> bool) -> Value {
        let start = Instant::now();
        loop {
            let (_, run) = self.get(&format!("/runs/{id}"));
            if what(&run) {
                return run;
            }
            assert!(start.elapsed() < Duration::from_secs(60), "timed out; last state {run}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}
