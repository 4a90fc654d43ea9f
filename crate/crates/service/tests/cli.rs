use std::path::Path;
use std::process::{Command, Output};

use groupchat_core::RunLog;
use serde_json::Value;

fn groupchat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groupchat")).args(args).current_dir(cwd).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn run_then_replay_reproduces_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = groupchat(&["run", "--story", "inheritance", "--backend", "scripted:demo", "--rounds", "2", "--out", "run.jsonl"], d);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("kendall"));
    let log = RunLog::from_jsonl(&std::fs::read_to_string(d.join("run.jsonl")).unwrap()).unwrap();
    assert_eq!(log.seed(), 42);
    assert!(log.settlement.is_some());
    assert!(d.join("run.jsonl.cache").is_dir());

    let out = groupchat(&["replay", "--runlog", "run.jsonl", "--out", "again.jsonl"], d);
    assert!(out.status.success(), "{}{}", text(&out.stdout), text(&out.stderr));
    assert!(text(&out.stdout).contains("identical"));
    assert_eq!(std::fs::read(d.join("run.jsonl")).unwrap(), std::fs::read(d.join("again.jsonl")).unwrap());

    // replaying against the scripted backend directly also works
    let out = groupchat(&["replay", "--runlog", "run.jsonl", "--backend", "scripted:demo"], d);
    assert!(out.status.success(), "{}", text(&out.stderr));

    let original = std::fs::read_to_string(d.join("run.jsonl")).unwrap();
    let speech = log.records().iter().find(|r| !r.payload.text.is_empty()).unwrap().payload.text.clone();
    let tampered = original.replacen(&serde_json::to_string(&speech).unwrap(), "\"something else entirely\"", 1);
    assert_ne!(tampered, original);
    std::fs::write(d.join("tampered.jsonl"), tampered).unwrap();
    let out = groupchat(&["replay", "--runlog", "tampered.jsonl", "--cache", "run.jsonl.cache"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("differs at line"));
}

#[test]
fn eval_commands_print_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(groupchat(&["run", "--story", "philosophy", "--backend", "scripted:demo", "--rounds", "1", "--out", "p.jsonl", "--no-cache"], d)
        .status
        .success());
    assert!(!d.join("p.jsonl.cache").exists());
    for args in [
        vec!["eval", "entropy", "--runlog", "p.jsonl"],
        vec!["eval", "probe", "--backend", "scripted:demo", "--trials", "3"],
        vec!["eval", "align", "--story", "inheritance", "--backend", "scripted:hostile", "--observed", "shiv", "--reps", "2", "--rounds", "2"],
    ] {
        let out = groupchat(&args, d);
        assert!(out.status.success(), "{args:?}: {}", text(&out.stderr));
        let v: Value = serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        assert!(v.is_object() || v.is_array(), "{args:?}");
    }
}

#[test]
fn listing_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = groupchat(&["stories"], d);
    assert!(out.status.success());
    for s in ["casting", "inheritance", "lawcourt", "philosophy"] {
        assert!(text(&out.stdout).contains(s), "{s}");
    }
    let out = groupchat(&["stories", "--show", "lawcourt"], d);
    let story: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(story["id"], "lawcourt");

    let out = groupchat(&["runs", "list", "--data-dir", "nothing-here"], d);
    assert!(out.status.success());

    let out = groupchat(&["run", "--story", "atlantis", "--backend", "scripted:demo", "--out", "x.jsonl"], d);
    assert!(!out.status.success());
    assert!(!text(&out.stderr).is_empty());
    let out = groupchat(&["run", "--story", "inheritance", "--backend", "fax:machine", "--out", "x.jsonl"], d);
    assert!(!out.status.success());
    let out = groupchat(&["replay", "--runlog", "missing.jsonl"], d);
    assert!(!out.status.success());
}

#[test]
fn the_documented_example_story_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let story = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/examples/bakery.json");
    let story = story.to_str().unwrap();
    let out = groupchat(&["stories", "--check", story], d);
    assert!(out.status.success(), "{}", text(&out.stdout));
    assert!(text(&out.stdout).starts_with("ok: bakery"));
    let out = groupchat(&["run", "--story", story, "--backend", "scripted:demo", "--rounds", "1", "--out", "b.jsonl", "--no-cache"], d);
    assert!(out.status.success(), "{}", text(&out.stderr));

    let mut broken: Value = serde_json::from_str(&std::fs::read_to_string(story).unwrap()).unwrap();
    broken["camps"][1]["members"].as_array_mut().unwrap().push("mayor".into());
    std::fs::write(d.join("broken.json"), broken.to_string()).unwrap();
    let out = groupchat(&["stories", "--check", "broken.json"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("`mayor` belongs to 2 camps"), "{}", text(&out.stdout));
}
